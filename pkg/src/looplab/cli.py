"""Command-line entry points.

Exit codes: 0 success, 1 usage or input error, 2 runtime failure, 3 training
halted on a non-finite value or exploding state.

Config files are JSON trees. ``train`` accepts ``{"train": {...}, "corpus":
"path"}`` where the ``train`` tree mirrors :class:`~looplab.trainer.TrainConfig`
(with a nested ``model``); the ``config.json`` echo written into every run
directory has the same shape, so ``looplab train --config RUN/config.json``
replays a run. ``--set dotted.key=value`` overrides single entries.

Run directories live under ``$LOOPLAB_RUN_ROOT`` (default ``./runs``) unless
``--run-dir`` is given.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from looplab import __version__, kernels
from looplab import checkpoint as ckpt_io
from looplab import dynamics, flops, scaling
from looplab.autodiff import NonFiniteError
from looplab.data import Corpus
from looplab.model import ModelConfig
from looplab.sampling import KINDS, MODES, SAMPLERS, DepthDistribution, build_schedule, mu_bwd_rule
from looplab.trainer import TrainConfig, eval_curve, load_model, run_training

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_HALT = 0, 1, 2, 3
RUN_ROOT_ENV = "LOOPLAB_RUN_ROOT"


class UsageError(Exception):
    pass


# --- helpers ----------------------------------------------------------------


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(tree, pairs):
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"override must look like key=value, got {pair!r}")
        node = tree
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"cannot set {key}: {p} is not a table")
        node[leaf] = _parse_value(value)
    return tree


def parse_int_list(text):
    """``"1,2,4-6"`` -> ``[1, 2, 4, 5, 6]``; duplicates dropped, first occurrence kept."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, sep, hi = part.partition("-")
        try:
            vals = range(int(lo), int(hi) + 1) if sep else [int(part)]
        except ValueError:
            raise UsageError(f"not an integer list: {text!r}") from None
        out.extend(vals)
    if not out:
        raise UsageError("empty integer list")
    return list(dict.fromkeys(out))


def parse_float_list(text):
    try:
        vals = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"not a number list: {text!r}") from None
    if not vals:
        raise UsageError("empty number list")
    return vals


def _load_corpus(path):
    try:
        return Corpus.from_path(path)
    except FileNotFoundError:
        raise UsageError(f"corpus not found: {path}") from None


def _model_config_from(tree):
    if "train" in tree:
        tree = tree["train"]
    if "model" in tree:
        tree = tree["model"]
    try:
        return ModelConfig.from_dict(tree)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model config: {exc}") from None


def _open_out(path):
    return open(path, "w", newline="", encoding="utf-8") if path else sys.stdout


def _close_out(fh):
    if fh is not sys.stdout:
        fh.close()


def _run_dir(args, default_name):
    if args.run_dir:
        return Path(args.run_dir)
    return Path(os.environ.get(RUN_ROOT_ENV, "runs")) / default_name


# --- commands ----------------------------------------------------------------


def cmd_train(args):
    tree = _read_json(args.config) if args.config else {}
    tree = apply_overrides(tree, args.set)
    if args.seed is not None:
        tree.setdefault("train", {})["seed"] = args.seed
    corpus_path = args.corpus or tree.get("corpus")
    if isinstance(corpus_path, dict):
        corpus_path = corpus_path.get("path")
    if not corpus_path:
        raise UsageError("no corpus given (use --corpus or a 'corpus' entry in the config)")
    try:
        cfg = TrainConfig.from_dict(dict(tree.get("train", {})))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train config: {exc}") from None
    corpus = _load_corpus(corpus_path)
    digest = corpus.sha256()
    expected = tree.get("corpus_sha256")
    if expected and expected != digest:
        print(f"warning: corpus hash {digest[:12]} differs from the recorded {expected[:12]}", file=sys.stderr)

    echo = {
        "train": cfg.to_dict(),
        "corpus": str(corpus_path),
        "corpus_sha256": digest,
        "seed": cfg.seed,
        "looplab_version": __version__,
        "kernel_backend": kernels.BACKEND,
    }
    cfg_hash = hashlib.sha256(json.dumps(echo["train"], sort_keys=True).encode()).hexdigest()[:10]
    run_dir = _run_dir(args, f"train-s{cfg.seed}-{cfg_hash}")
    if run_dir.exists() and any(run_dir.iterdir()) and not args.overwrite:
        raise UsageError(f"run directory {run_dir} is not empty (use --overwrite)")
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")

    res = run_training(cfg, corpus, run_dir=run_dir)
    last = res.records[-1] if res.records else None
    summary = {
        "run_dir": str(run_dir),
        "steps": cfg.steps,
        "halted": res.halted,
        "halt_reason": res.halt_reason,
        "halt_step": res.halt_step,
        "final_loss": last.loss if last else None,
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_HALT if res.halted else EXIT_OK


def cmd_eval(args):
    depths = parse_int_list(args.depths)
    if min(depths) < 1:
        raise UsageError("depths must be >= 1")
    model, _ = _load_checkpoint_model(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    curve = eval_curve(model, corpus, depths, batch_size=args.batch_size, max_batches=args.max_batches,
                       seed=args.seed, split=args.split)
    fh = _open_out(args.out)
    try:
        w = csv.writer(fh)
        w.writerow(["T", "loss"])
        for T in depths:
            w.writerow([T, repr(curve[T])])
    finally:
        _close_out(fh)
    return EXIT_OK


def _load_checkpoint_model(path):
    try:
        return load_model(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except ckpt_io.CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _checkpoint_paths(items):
    out = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            out.extend(sorted(p.glob("*.ckpt")))
        elif p.exists():
            out.append(p)
        else:
            raise UsageError(f"no such checkpoint or directory: {item}")
    return out


def _max_state_norm(ckpt_path, step):
    metrics = Path(ckpt_path).parent / "metrics.jsonl"
    if not metrics.exists() or step is None:
        return ""
    best = None
    with open(metrics, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            v = rec.get("state_norm")
            if v is not None and rec["step"] <= step:
                best = v if best is None else max(best, v)
    return "" if best is None else best


def cmd_stability_scan(args):
    rows = []
    for path in _checkpoint_paths(args.checkpoints):
        model, c = _load_checkpoint_model(path)
        rho = float(model.spectral_radius())
        step = c.meta.get("step")
        regime = dynamics.classify(rho).regime.value
        rows.append((step if step is not None else -1, str(path), rho, regime, _max_state_norm(path, step)))
    rows.sort(key=lambda r: (r[0], r[1]))
    fh = _open_out(args.out)
    try:
        w = csv.writer(fh)
        w.writerow(["step", "checkpoint", "rho", "regime", "max_state_norm"])
        for step, path, rho, regime, norm in rows:
            w.writerow([step, path, repr(rho), regime, norm])
    finally:
        _close_out(fh)
    return EXIT_OK


def _read_rows(path, kind):
    try:
        return scaling.read_jsonl(path, kind)
    except FileNotFoundError:
        raise UsageError(f"input not found: {path}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_fit(args):
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    kw = dict(restarts=args.restarts, seed=args.seed)
    result = {}
    if args.law == "training":
        recs = _read_rows(args.input, "records")
        fit = _fit_or_usage(scaling.fit_training_law, recs, **kw)
        result["training"] = fit.to_dict()
        if out_dir:
            by_mu = {}
            for r in recs:
                by_mu.setdefault(r.mu_rec, []).append(r.params)
            Ds = np.logspace(np.log10(min(r.D for r in recs)), np.log10(max(r.D for r in recs)), 25)
            scaling.write_contour_csv(out_dir / "contour.csv", fit.coefficients, lambda m: float(np.mean(by_mu[m])),
                                      sorted(by_mu), Ds)
    elif args.law == "isoflop":
        recs = _read_rows(args.input, "records")
        minima = _fit_or_usage(scaling.isoflop_minima, recs)
        good = [(F, f) for F, f in minima if f.converged]
        result["parabolas"] = [{"flops": F, **f.to_dict()} for F, f in minima]
        if len(good) >= 3:
            F = [g[0] for g in good]
            mu_star = [g[1].extra["x_min"] for g in good]
            # compute-optimal tokens: interpolate each budget's records at its optimal depth
            d_star = [_tokens_at(recs, Fi, m) for Fi, m in zip(F, mu_star)]
            mu_fit, d_fit = scaling.extract_power_laws(F, mu_star, d_star)
            result["mu_star"], result["tokens_star"] = mu_fit.to_dict(), d_fit.to_dict()
    elif args.law == "ttc":
        curves = _read_rows(args.input, "curves")
        fits = [_fit_or_usage(scaling.fit_ttc_curve, c, args.form, **kw) for c in curves]
        result["ttc"] = [dict(f.to_dict(), mu_rec=c.mu_rec) for c, f in zip(curves, fits)]
        if out_dir:
            with open(out_dir / "curves.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["curve", "mu_rec", "T", "loss", "fit"])
                for i, (c, f) in enumerate(zip(curves, fits)):
                    pred = scaling.predict_curve(args.form, f.coefficients, c.T)
                    for T, v, p in zip(c.T, c.loss, pred):
                        w.writerow([i, c.mu_rec, T, v, float(p)])
    elif args.law == "forms":
        curves = _read_rows(args.input, "curves")
        rows = scaling.functional_form_report(curves, **kw)
        result["forms"] = rows
        if out_dir:
            with open(out_dir / "forms.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]))
                w.writeheader()
                w.writerows(rows)
    else:
        curves = _read_rows(args.input, "curves")
        recs = _read_rows(args.records, "records") if args.records else []
        modes = ["fixed", "learned"] if args.gamma == "both" else [args.gamma]
        for mode in modes:
            fit = _fit_or_usage(scaling.fit_unified, curves, recs, gamma_mode=mode, **kw)
            result[f"unified_gamma_{mode}"] = fit.to_dict()
    _write_json(out_dir / "fit.json" if out_dir else None, result)
    if out_dir:
        print(json.dumps({"out_dir": str(out_dir), "fits": sorted(result)}))
    return EXIT_OK


def _fit_or_usage(fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _tokens_at(records, F, mu):
    same = sorted((r.mu_rec, r.D) for r in records if r.flops == F)
    xs, ds = zip(*same)
    return float(np.exp(np.interp(np.log(mu), np.log(xs), np.log(ds))))


def _model_config_arg(args):
    tree = _read_json(args.config) if args.config else {}
    tree = apply_overrides(tree, args.set)
    return _model_config_from(tree)


def cmd_flops(args):
    cfg = _model_config_arg(args)
    mu_bwd = args.mu_bwd if args.mu_bwd is not None else mu_bwd_rule(args.mu_rec)
    try:
        budget = flops.training_flops(cfg, args.mu_rec, mu_bwd, args.tokens, args.seq_len)
        n_loop, n_pc, n_eff = flops.effective_params(cfg, args.mu_rec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = dict(budget.to_dict(), N_loop=n_loop, N_pc=n_pc, N_eff=n_eff, mu_rec=args.mu_rec, mu_bwd=mu_bwd)
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_isoflop_plan(args):
    cfg = _model_config_arg(args)
    budgets = parse_float_list(args.budgets)
    mus = parse_int_list(args.mu_rec)
    fh = _open_out(args.out)
    try:
        w = csv.writer(fh)
        w.writerow(["budget", "mu_rec", "mu_bwd", "tokens", "flops_per_token", "N_eff"])
        for F in budgets:
            for mu in mus:
                mb = mu_bwd_rule(mu)
                try:
                    D = flops.tokens_for_budget(cfg, mu, mb, F, args.seq_len)
                except ValueError as exc:
                    raise UsageError(str(exc)) from None
                w.writerow([F, mu, mb, repr(D), repr(flops.flops_per_token(cfg, mu, mb, args.seq_len)),
                            flops.effective_params(cfg, mu)[2]])
    finally:
        _close_out(fh)
    return EXIT_OK


def cmd_sample_audit(args):
    mu_bwd = args.mu_bwd if args.mu_bwd is not None else mu_bwd_rule(args.mu_rec)
    try:
        dist = DepthDistribution(args.dist, args.sigma)
        scheds = [build_schedule(args.batch_size, args.mu_rec, mu_bwd, dist, args.seed, step, args.mode, args.sampler)
                  for step in range(args.steps)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    fh = _open_out(args.out)
    try:
        for s in scheds:
            s.dump_jsonl(fh)
    finally:
        _close_out(fh)
    return EXIT_OK


# --- parser --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="looplab", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"looplab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a looped model")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--corpus", help="corpus file or directory")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.steps=200")
    t.add_argument("--seed", type=int)
    t.add_argument("--run-dir")
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="loss against test-time depth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--depths", default="1-8", help="e.g. 1,2,4 or 1-12")
    e.add_argument("--batch-size", type=int, default=16)
    e.add_argument("--max-batches", type=int, default=8)
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("stability-scan", help="spectral radius of checkpoints")
    s.add_argument("checkpoints", nargs="*", help="checkpoint files or run directories")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_stability_scan)

    f = sub.add_parser("fit", help="fit scaling laws")
    f.add_argument("--law", choices=("training", "isoflop", "ttc", "forms", "unified"), required=True)
    f.add_argument("--input", required=True, help="JSONL of training records or test-time curves")
    f.add_argument("--records", help="extra training records for the unified law")
    f.add_argument("--form", choices=scaling.TTC_FORMS, default="exp-decay")
    f.add_argument("--gamma", choices=("fixed", "learned", "both"), default="both")
    f.add_argument("--restarts", type=int, default=scaling.DEFAULT_RESTARTS)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out-dir")
    f.set_defaults(fn=cmd_fit)

    for name, fn, help_ in (("flops", cmd_flops, "training FLOPs of one configuration"),
                            ("isoflop-plan", cmd_isoflop_plan, "token budgets for an isoFLOP sweep")):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--config", help="JSON model (or train) config")
        q.add_argument("--set", action="append", metavar="KEY=VALUE")
        q.add_argument("--seq-len", type=int)
        if name == "flops":
            q.add_argument("--mu-rec", type=int, required=True)
            q.add_argument("--mu-bwd", type=int)
            q.add_argument("--tokens", type=float, required=True)
        else:
            q.add_argument("--budgets", required=True, help="comma-separated FLOP budgets")
            q.add_argument("--mu-rec", required=True, help="e.g. 1,2,4,8")
            q.add_argument("--out")
        q.set_defaults(fn=fn)

    a = sub.add_parser("sample-audit", help="dump depth schedules as JSONL")
    a.add_argument("--batch-size", type=int, default=8)
    a.add_argument("--mu-rec", type=int, default=8)
    a.add_argument("--mu-bwd", type=int)
    a.add_argument("--steps", type=int, default=1)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--dist", choices=KINDS, default="poisson-lognormal")
    a.add_argument("--sigma", type=float, default=0.5)
    a.add_argument("--mode", choices=MODES, default="per-sequence")
    a.add_argument("--sampler", choices=SAMPLERS, default="corrected")
    a.add_argument("--out")
    a.set_defaults(fn=cmd_sample_audit)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"looplab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"looplab: non-finite value: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"looplab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
