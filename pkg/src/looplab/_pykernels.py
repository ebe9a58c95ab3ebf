"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Arrays are float64 and C-contiguous on entry; callers in :mod:`looplab.kernels`
take care of that.
"""

import math

import numpy as np


def rms_norm_fwd(x, gain, eps):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=1) + eps)
    return x * inv[:, None] * gain, inv


def rms_norm_bwd(g, x, gain, inv):
    d = x.shape[1]
    xhat = x * inv[:, None]
    dgain = np.sum(g * xhat, axis=0)
    gx = g * gain
    proj = np.sum(gx * xhat, axis=1) / d
    dx = inv[:, None] * (gx - xhat * proj[:, None])
    return dx, dgain


def attention_fwd(q, k, v, scale):
    """Causal softmax attention over stacked (G, n, dh) heads.

    Returns the output and the probability matrix (zeros above the diagonal).
    """
    n = q.shape[1]
    s = np.matmul(q, k.transpose(0, 2, 1)) * scale
    future = np.triu(np.ones((n, n), dtype=bool), k=1)
    s[:, future] = -np.inf
    s -= s.max(axis=2, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=2, keepdims=True)
    return np.matmul(p, v), p


def attention_bwd(dout, q, k, v, p, scale):
    dv = np.matmul(p.transpose(0, 2, 1), dout)
    dp = np.matmul(dout, v.transpose(0, 2, 1))
    ds = p * (dp - np.sum(dp * p, axis=2, keepdims=True)) * scale
    dq = np.matmul(ds, k)
    dk = np.matmul(ds.transpose(0, 2, 1), q)
    return dq, dk, dv


def cross_entropy_fwd(logits, targets):
    m = logits.max(axis=1)
    lse = m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1))
    rows = np.arange(logits.shape[0])
    return lse - logits[rows, targets], lse


def cross_entropy_bwd(logits, targets, lse, scale):
    d = np.exp(logits - lse[:, None])
    d[np.arange(logits.shape[0]), targets] -= 1.0
    return d * scale


def diag_scan(a, b, h0, steps):
    traj = np.empty((steps + 1,) + h0.shape)
    traj[0] = h0
    for t in range(steps):
        traj[t + 1] = a * traj[t] + b
    return traj


def poisson_inverse(lam, u):
    """Invert the Poisson CDF at ``u`` by sequential search from zero."""
    out = np.empty(lam.shape[0], dtype=np.int64)
    for i in range(lam.shape[0]):
        out[i] = _poisson_inverse_one(float(lam[i]), float(u[i]))
    return out


def _poisson_inverse_one(lam, u):
    if lam <= 0.0:
        return 0
    log_lam = math.log(lam)
    logp = -lam
    cdf = math.exp(logp)
    k = 0
    while cdf < u:
        k += 1
        logp += log_lam - math.log(k)
        p = math.exp(logp)
        cdf += p
        # past the mode with a vanishing term: cdf has saturated below u
        if k > lam and p < 1e-300:
            break
    return k


def huber(r, delta):
    a = np.abs(r)
    quad = a <= delta
    total = float(np.sum(np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))))
    grad = np.where(quad, r, delta * np.sign(r))
    return total, grad
