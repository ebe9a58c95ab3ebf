"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on inputs sized like a desk-scale training step. Outputs
of the two backends are compared before timing.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from looplab import kernels


def cases(rng):
    B, n, d, G, dh, V = 16, 64, 64, 32, 32, 259
    x = rng.normal(size=(B * n, d))
    gain = rng.normal(size=d)
    q, k, v = (rng.normal(size=(G, n, dh)) for _ in range(3))
    logits = rng.normal(size=(B * n, V))
    targets = rng.integers(0, V, size=B * n).astype(np.int64)
    lam = np.exp(rng.normal(np.log(8.0), 0.5, size=4096))
    u = rng.random(4096)
    r = rng.normal(scale=3e-3, size=2000)
    decay = np.linspace(0.1, 0.99, d)

    def rms_bwd_args(m):
        _, inv = m.rms_norm_fwd(x, gain, 1e-6)
        return (x, x, gain, inv)

    def attn_bwd_args(m):
        _, p = m.attention_fwd(q, k, v, 0.125)
        return (q, q, k, v, p, 0.125)

    def ce_bwd_args(m):
        _, lse = m.cross_entropy_fwd(logits, targets)
        return (logits, targets, lse, 1.0 / logits.shape[0])

    return [
        ("rms_norm_fwd", lambda m: (x, gain, 1e-6)),
        ("rms_norm_bwd", rms_bwd_args),
        ("attention_fwd", lambda m: (q, k, v, 0.125)),
        ("attention_bwd", attn_bwd_args),
        ("cross_entropy_fwd", lambda m: (logits, targets)),
        ("cross_entropy_bwd", ce_bwd_args),
        ("diag_scan", lambda m: (decay, np.ones((B, d)), np.zeros((B, d)), 64)),
        ("poisson_inverse", lambda m: (lam, u)),
        ("huber", lambda m: (r, 1e-3)),
    ]


def _flatten(out):
    if isinstance(out, tuple):
        return [np.asarray(o, dtype=np.float64) for o in out]
    return [np.asarray(out, dtype=np.float64)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    try:
        fast = kernels.backend_module("cython")
    except ImportError:
        print("compiled extension not built; only the numpy fallback is available", file=sys.stderr)
        return 1
    slow = kernels.backend_module("python")
    rng = np.random.default_rng(0)
    results = []
    print(f"{'kernel':<20}{'numpy (ms)':>12}{'compiled (ms)':>15}{'speedup':>10}{'max |diff|':>12}")
    for name, make in cases(rng):
        a_py, a_c = make(slow), make(fast)
        out_py, out_c = getattr(slow, name)(*a_py), getattr(fast, name)(*a_c)
        diff = max(float(np.max(np.abs(p - c))) if p.size else 0.0 for p, c in zip(_flatten(out_py), _flatten(out_c)))
        times = {}
        for label, mod, args_ in (("py", slow, a_py), ("c", fast, a_c)):
            fn = getattr(mod, name)
            loops, _ = timeit.Timer(lambda: fn(*args_)).autorange()
            best = min(timeit.repeat(lambda: fn(*args_), number=loops, repeat=args.repeat)) / loops
            times[label] = best * 1e3
        speedup = times["py"] / times["c"]
        results.append({"kernel": name, "numpy_ms": times["py"], "compiled_ms": times["c"], "speedup": speedup,
                        "max_abs_diff": diff})
        print(f"{name:<20}{times['py']:>12.3f}{times['c']:>15.3f}{speedup:>10.2f}{diff:>12.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
