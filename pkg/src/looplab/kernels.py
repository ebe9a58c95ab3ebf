"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``LOOPLAB_PURE_PYTHON=1`` to force the fallback (useful for comparing the
two, see ``benchmarks/bench_kernels.py``).
"""

import os

import numpy as np

from looplab import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("LOOPLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from looplab import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        pass


def backend_module(name=None):
    """Return the kernel module for ``name`` ("cython" or "python"), default active."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        from looplab import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _c(a):
    # typed memoryviews in the extension reject read-only buffers (e.g. broadcast views)
    return np.require(a, dtype=np.float64, requirements=("C", "W"))


def rms_norm_fwd(x2d, gain, eps):
    return _impl.rms_norm_fwd(_c(x2d), _c(gain), float(eps))


def rms_norm_bwd(g2d, x2d, gain, inv):
    return _impl.rms_norm_bwd(_c(g2d), _c(x2d), _c(gain), _c(inv))


def attention_fwd(q, k, v, scale):
    return _impl.attention_fwd(_c(q), _c(k), _c(v), float(scale))


def attention_bwd(dout, q, k, v, p, scale):
    return _impl.attention_bwd(_c(dout), _c(q), _c(k), _c(v), _c(p), float(scale))


def cross_entropy_fwd(logits, targets):
    return _impl.cross_entropy_fwd(_c(logits), np.ascontiguousarray(targets, dtype=np.int64))


def cross_entropy_bwd(logits, targets, lse, scale):
    return _impl.cross_entropy_bwd(
        _c(logits), np.ascontiguousarray(targets, dtype=np.int64), _c(lse), float(scale)
    )


def diag_scan(a, b, h0, steps):
    return _impl.diag_scan(_c(a), _c(b), _c(h0), int(steps))


def poisson_inverse(lam, u):
    return _impl.poisson_inverse(_c(np.atleast_1d(lam)), _c(np.atleast_1d(u)))


def huber(r, delta):
    return _impl.huber(_c(np.ravel(r)), float(delta))
