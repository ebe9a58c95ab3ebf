# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Same signatures and semantics as :mod:`looplab._pykernels`. Row reductions run
sequentially in index order, so results are reproducible run to run. The dense
products inside attention go through numpy's matmul (BLAS); the fused loops
here replace the mask/softmax/row-dot passes that numpy would materialize as
temporaries.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log, fabs, INFINITY

cnp.import_array()


def rms_norm_fwd(double[:, ::1] x, double[::1] gain, double eps):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1], i, j
    cdef double acc, s
    y_arr = np.empty((rows, d))
    inv_arr = np.empty(rows)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] inv = inv_arr
    for i in range(rows):
        acc = 0.0
        for j in range(d):
            acc += x[i, j] * x[i, j]
        s = 1.0 / sqrt(acc / d + eps)
        inv[i] = s
        for j in range(d):
            y[i, j] = x[i, j] * s * gain[j]
    return y_arr, inv_arr


def rms_norm_bwd(double[:, ::1] g, double[:, ::1] x, double[::1] gain, double[::1] inv):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1], i, j
    cdef double proj, s, xh
    dx_arr = np.empty((rows, d))
    dgain_arr = np.zeros(d)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    for i in range(rows):
        s = inv[i]
        proj = 0.0
        for j in range(d):
            xh = x[i, j] * s
            dgain[j] += g[i, j] * xh
            proj += g[i, j] * gain[j] * xh
        proj /= d
        for j in range(d):
            dx[i, j] = s * (g[i, j] * gain[j] - x[i, j] * s * proj)
    return dx_arr, dgain_arr


def attention_fwd(q, k, v, double scale):
    s_arr = np.matmul(q, k.transpose(0, 2, 1))
    cdef double[:, :, ::1] s = s_arr
    cdef Py_ssize_t groups = s.shape[0], n = s.shape[1], g, i, j
    cdef double m, total, val
    for g in range(groups):
        for i in range(n):
            m = -INFINITY
            for j in range(i + 1):
                val = s[g, i, j] * scale
                s[g, i, j] = val
                if val > m:
                    m = val
            total = 0.0
            for j in range(i + 1):
                val = exp(s[g, i, j] - m)
                s[g, i, j] = val
                total += val
            total = 1.0 / total
            for j in range(i + 1):
                s[g, i, j] *= total
            for j in range(i + 1, n):
                s[g, i, j] = 0.0
    return np.matmul(s_arr, v), s_arr


def attention_bwd(dout, q, k, v, p_arr, double scale):
    dv = np.matmul(p_arr.transpose(0, 2, 1), dout)
    dp_arr = np.matmul(dout, v.transpose(0, 2, 1))
    cdef double[:, :, ::1] dp = dp_arr
    cdef double[:, :, ::1] p = p_arr
    cdef Py_ssize_t groups = dp.shape[0], n = dp.shape[1], g, i, j
    cdef double rowdot
    for g in range(groups):
        for i in range(n):
            rowdot = 0.0
            for j in range(i + 1):
                rowdot += dp[g, i, j] * p[g, i, j]
            for j in range(i + 1):
                dp[g, i, j] = p[g, i, j] * (dp[g, i, j] - rowdot) * scale
            for j in range(i + 1, n):
                dp[g, i, j] = 0.0
    dq = np.matmul(dp_arr, k)
    dk = np.matmul(dp_arr.transpose(0, 2, 1), q)
    return dq, dk, dv


def cross_entropy_fwd(double[:, ::1] logits, cnp.int64_t[::1] targets):
    cdef Py_ssize_t rows = logits.shape[0], vocab = logits.shape[1], i, j
    cdef double m, total
    loss_arr = np.empty(rows)
    lse_arr = np.empty(rows)
    cdef double[::1] loss = loss_arr
    cdef double[::1] lse = lse_arr
    for i in range(rows):
        m = logits[i, 0]
        for j in range(1, vocab):
            if logits[i, j] > m:
                m = logits[i, j]
        total = 0.0
        for j in range(vocab):
            total += exp(logits[i, j] - m)
        lse[i] = m + log(total)
        loss[i] = lse[i] - logits[i, targets[i]]
    return loss_arr, lse_arr


def cross_entropy_bwd(double[:, ::1] logits, cnp.int64_t[::1] targets, double[::1] lse, double scale):
    cdef Py_ssize_t rows = logits.shape[0], vocab = logits.shape[1], i, j
    out_arr = np.empty((rows, vocab))
    cdef double[:, ::1] out = out_arr
    for i in range(rows):
        for j in range(vocab):
            out[i, j] = exp(logits[i, j] - lse[i]) * scale
        out[i, targets[i]] -= scale
    return out_arr


def diag_scan(double[::1] a, double[:, ::1] b, double[:, ::1] h0, Py_ssize_t steps):
    cdef Py_ssize_t rows = h0.shape[0], d = h0.shape[1], t, i, j
    traj_arr = np.empty((steps + 1, rows, d))
    cdef double[:, :, ::1] traj = traj_arr
    traj[0, :, :] = h0
    for t in range(steps):
        for i in range(rows):
            for j in range(d):
                traj[t + 1, i, j] = a[j] * traj[t, i, j] + b[i, j]
    return traj_arr


cdef long _poisson_one(double lam, double u):
    cdef double log_lam, logp, cdf, p
    cdef long k = 0
    if lam <= 0.0:
        return 0
    log_lam = log(lam)
    logp = -lam
    cdf = exp(logp)
    while cdf < u:
        k += 1
        logp += log_lam - log(<double>k)
        p = exp(logp)
        cdf += p
        if k > lam and p < 1e-300:
            break
    return k


def poisson_inverse(double[::1] lam, double[::1] u):
    cdef Py_ssize_t count = lam.shape[0], i
    out_arr = np.empty(count, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    for i in range(count):
        out[i] = _poisson_one(lam[i], u[i])
    return out_arr


def huber(double[::1] r, double delta):
    cdef Py_ssize_t count = r.shape[0], i
    cdef double total = 0.0, a
    grad_arr = np.empty(count)
    cdef double[::1] grad = grad_arr
    for i in range(count):
        a = fabs(r[i])
        if a <= delta:
            total += 0.5 * r[i] * r[i]
            grad[i] = r[i]
        else:
            total += delta * (a - 0.5 * delta)
            grad[i] = delta if r[i] > 0 else -delta
    return total, grad_arr
