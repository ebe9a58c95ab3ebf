"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the :class:`Graph` that is active (``with Graph():``)
when they run, and only if at least one input is tracked by it. Tracked inputs
are leaves with ``requires_grad=True`` (parameters) and results of earlier ops
on the same graph. Ops executed with no active graph, or inside
:func:`no_grad`, are plain numpy computations; this is how the truncated
prefix of a loop is run without contributing gradients.

A graph is consumed by :func:`backward`; a second backward on it raises.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from looplab import kernels

__all__ = [
    "Tensor",
    "Parameter",
    "Graph",
    "GraphError",
    "NonFiniteError",
    "no_grad",
    "backward",
    "count_flops",
    "finite_diff_check",
]

_ACTIVE: list = []
_COUNTERS: list = []


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from its inputs."""


class GraphError(RuntimeError):
    pass


class Tensor:
    """An immutable dense array of doubles, optionally a differentiable leaf."""

    __slots__ = ("data", "requires_grad", "graph", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.graph = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = object.__new__(Tensor)
        t.data = arr
        t.requires_grad = False
        t.graph = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar():
    raise ValueError("item() requires a single-element tensor")


class Parameter(Tensor):
    """A trainable leaf. The optimizer rebinds ``data``; arrays are never mutated in place."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


class Graph:
    """Tape of recorded operations in topological (execution) order."""

    def __init__(self):
        self._nodes = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise GraphError("graph already consumed by backward; build a new one")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def tracks(self, t):
        return isinstance(t, Tensor) and t.requires_grad and (t.graph is None or t.graph is self)

    def _record(self, out, parents, needs, vjp):
        out.requires_grad = True
        out.graph = self
        self._nodes.append((out, parents, needs, vjp))


@contextlib.contextmanager
def no_grad():
    _ACTIVE.append(None)
    try:
        yield
    finally:
        _ACTIVE.pop()


def _active():
    return _ACTIVE[-1] if _ACTIVE else None


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _emit(op, out, parents, vjp):
    """Finalize an op result: finiteness check, then record on the active graph."""
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    t = Tensor._wrap(out)
    g = _active()
    if g is not None and not g.consumed:
        needs = tuple(g.tracks(p) for p in parents)
        if any(needs):
            g._record(t, parents, needs, vjp)
    return t


# ---------------------------------------------------------------------------
# FLOP instrumentation


class FlopCounter:
    """Counts multiply-accumulate FLOPs (2 per MAC) of matmul-class ops."""

    def __init__(self):
        self.forward = 0
        self.backward = 0

    @property
    def total(self):
        return self.forward + self.backward


@contextlib.contextmanager
def count_flops():
    c = FlopCounter()
    _COUNTERS.append(c)
    try:
        yield c
    finally:
        _COUNTERS.remove(c)


def _count(flops, backward=False):
    for c in _COUNTERS:
        if backward:
            c.backward += flops
        else:
            c.forward += flops


# ---------------------------------------------------------------------------
# backward


def backward(graph, loss):
    """Reverse-mode sweep over ``graph`` seeded at the scalar ``loss``.

    Returns a dict mapping each tracked leaf to its gradient array. Leaves that
    do not require grad never appear.
    """
    if graph.consumed:
        raise GraphError("backward already ran on this graph")
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise GraphError("backward needs a scalar loss tensor")
    if loss.graph is not graph:
        raise GraphError("loss was not produced on this graph")
    graph.consumed = True
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, parents, needs, vjp in reversed(graph._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = vjp(g, needs)
        for p, need, pg in zip(parents, needs, pgrads):
            if not need or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if p.graph is None:
                leaves[key] = p
    graph._nodes = []
    return {p: grads[k] for k, p in leaves.items()}


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g, n: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g, n: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g, needs):
        da = _unbroadcast(g * b.data, a.shape) if needs[0] else None
        db = _unbroadcast(g * a.data, b.shape) if needs[1] else None
        return da, db

    return _emit("mul", out, (a, b), vjp)


def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g, n: (g * out,))


def softplus(x):
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return _emit("softplus", out, (x,), lambda g, n: (g * sig,))


def clip(x, lo, hi):
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clip", out, (x,), lambda g, n: (g * inside,))


def relu_squared(x):
    pos = np.maximum(x.data, 0.0)
    return _emit("relu_squared", pos * pos, (x,), lambda g, n: (2.0 * pos * g,))


def sum(x, axis=None):  # noqa: A001
    shape = x.shape
    out = np.sum(x.data, axis=axis)
    if axis is None:
        return _emit("sum", np.asarray(out), (x,), lambda g, n: (np.broadcast_to(g, shape).copy(),))
    return _emit("sum", out, (x,), lambda g, n: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x, axis=None):
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / count)


def reshape(x, shape):
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g, n: (g.reshape(old),))


def transpose(x, axes=None):
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g, n: (g.transpose(inv),))


def concat(xs, axis=-1):
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs), vjp)


def where(mask, a, b):
    """Select ``a`` where ``mask`` (a constant boolean array) holds, else ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return _unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)

    return _emit("where", np.where(mask, a.data, b.data), (a, b), vjp)


def embedding(weight, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    vocab = weight.shape[0]

    def vjp(g, needs):
        dw = np.zeros((vocab, g.shape[-1]))
        np.add.at(dw, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (dw,)

    return _emit("embedding", weight.data[ids], (weight,), vjp)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    macs = out.size * a.shape[-1]
    _count(2 * macs)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        da = db = None
        if needs[0]:
            da = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), sa)
            _count(2 * macs, backward=True)
        if needs[1]:
            db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), sb)
            _count(2 * macs, backward=True)
        return da, db

    return _emit("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# fused model ops


def rms_norm(x, gain=None, eps=1e-6):
    """``gain * x / sqrt(mean(x**2) + eps)`` along the last axis."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    shape = x.shape
    d = shape[-1]
    gain_arr = np.ones(d) if gain is None else gain.data
    if gain_arr.shape != (d,):
        raise ValueError(f"gain shape {gain_arr.shape} does not match last axis {d}")
    x2 = x.data.reshape(-1, d)
    y, inv = kernels.rms_norm_fwd(x2, gain_arr, eps)
    if gain is not None and gain.requires_grad:
        _count(2 * y.size)
    parents = (x,) if gain is None else (x, gain)

    def vjp(g, needs):
        dx, dgain = kernels.rms_norm_bwd(g.reshape(-1, d), x2, gain_arr, inv)
        if gain is not None and needs[-1]:
            _count(4 * y.size, backward=True)
        return (dx.reshape(shape), dgain)[: len(parents)]

    return _emit("rms_norm", y.reshape(shape), parents, vjp)


def rope_tables(n, d_head, theta):
    """Cos/sin tables (n, d_head/2) for interleaved-pair rotary embedding."""
    if d_head % 2:
        raise ValueError("rotary embedding needs an even head dimension")
    freqs = theta ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = np.arange(n, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def _rotate(x, cos, sin, inverse=False):
    x0, x1 = x[..., 0::2], x[..., 1::2]
    if inverse:
        sin = -sin
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def causal_attention(q, k, v, rope_theta=50000.0, rope=True):
    """Causal softmax attention on (..., n, d_head) heads with rotary q/k.

    Leading axes are flattened into independent head groups.
    """
    if not (q.shape == k.shape and q.shape[:-1] == v.shape[:-1]):
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    lead, n, dh = q.shape[:-2], q.shape[-2], q.shape[-1]
    dv = v.shape[-1]
    qa, ka = q.data, k.data
    if rope:
        cos, sin = rope_tables(n, dh, rope_theta)
        qa, ka = _rotate(qa, cos, sin), _rotate(ka, cos, sin)
    qg, kg, vg = qa.reshape(-1, n, dh), ka.reshape(-1, n, dh), v.data.reshape(-1, n, dv)
    scale = 1.0 / math.sqrt(dh)
    out, p = kernels.attention_fwd(qg, kg, vg, scale)
    pairs = qg.shape[0] * n * (n + 1) // 2
    _count(2 * pairs * (dh + dv))

    def vjp(g, needs):
        dq, dk, dvv = kernels.attention_bwd(g.reshape(-1, n, dv), qg, kg, vg, p, scale)
        _count(4 * pairs * (dh + dv), backward=True)
        dq, dk = dq.reshape(q.shape), dk.reshape(k.shape)
        if rope:
            dq, dk = _rotate(dq, cos, sin, inverse=True), _rotate(dk, cos, sin, inverse=True)
        return dq, dk, dvv.reshape(v.shape)

    return _emit("causal_attention", out.reshape(lead + (n, dv)), (q, k, v), vjp)


def cross_entropy(logits, targets):
    """Mean negative log-softmax at integer ``targets`` over all leading positions."""
    vocab = logits.shape[-1]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    l2 = logits.data.reshape(-1, vocab)
    if l2.shape[0] != t.size:
        raise ValueError("targets do not match logits rows")
    rows, lse = kernels.cross_entropy_fwd(l2, t)
    shape = logits.shape
    scale = 1.0 / t.size

    def vjp(g, needs):
        return (kernels.cross_entropy_bwd(l2, t, lse, float(g) * scale).reshape(shape),)

    return _emit("cross_entropy", np.asarray(np.sum(rows) * scale), (logits,), vjp)


# ---------------------------------------------------------------------------
# test oracle


def finite_diff_check(fn, inputs, eps=1e-5, grads=None):
    """Worst relative error between autodiff and central differences.

    ``fn`` maps the tensors in ``inputs`` to a scalar tensor. Relative error uses
    ``max(|analytic|, |numeric|, 1e-8)`` as the denominator. ``grads`` may supply
    the analytic gradients (a list aligned with ``inputs``) to check foreign
    gradients; otherwise they come from one backward pass.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaves = [Parameter(t.data if isinstance(t, Tensor) else t) for t in inputs]
    if grads is None:
        with Graph() as g:
            out = fn(*leaves)
        got = backward(g, out)
        grads = [got.get(p, np.zeros_like(p.data)) for p in leaves]
    worst = 0.0
    for idx, p in enumerate(leaves):
        base = p.data.copy()
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            p.data = base.copy()
            with no_grad():
                fp = float(fn(*leaves).data)
            flat[j] = orig - eps
            p.data = base.copy()
            with no_grad():
                fm = float(fn(*leaves).data)
            flat[j] = orig
            p.data = base.copy()
            num = (fp - fm) / (2 * eps)
            ana = float(np.asarray(grads[idx]).reshape(-1)[j])
            denom = max(abs(ana), abs(num), 1e-8)
            worst = max(worst, abs(ana - num) / denom)
    return worst
