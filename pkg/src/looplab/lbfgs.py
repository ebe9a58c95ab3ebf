"""Limited-memory BFGS with a strong-Wolfe line search.

``objective(x)`` must return ``(f, grad)``. The search direction comes from
the standard two-loop recursion over the last ``memory`` curvature pairs.
When the line search cannot find an acceptable step, the memory is dropped
and the iterate is nudged by a small random perturbation; these restarts are
counted and capped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS = float(np.finfo(np.float64).eps)


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    evaluations: int
    restarts: int
    converged: bool
    message: str


class _Counted:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        f, g = self.fn(x)
        return float(f), np.asarray(g, dtype=np.float64)


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic matching values and slopes at ``a`` and ``b``, or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    x = b - (b - a) * (gb + d2 - d1) / denom
    return x if math.isfinite(x) else None


def _zoom(phi, lo, hi, f0, g0, c1, c2, max_iter=30):
    a_lo, f_lo, g_lo = lo
    a_hi, f_hi, g_hi = hi
    for _ in range(max_iter):
        left, right = min(a_lo, a_hi), max(a_lo, a_hi)
        width = right - left
        if width <= 1e-16 * max(1.0, right):
            break
        a = _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
        # keep the trial point away from the bracket ends
        if a is None or not (left + 0.1 * width <= a <= right - 0.1 * width):
            a = 0.5 * (a_lo + a_hi)
        fa, ga, extra = phi(a)
        if not math.isfinite(fa) or fa > f0 + c1 * a * g0 or fa >= f_lo:
            a_hi, f_hi, g_hi = a, fa, ga
            continue
        if abs(ga) <= -c2 * g0:
            return a, fa, extra
        if ga * (a_hi - a_lo) >= 0:
            a_hi, f_hi, g_hi = a_lo, f_lo, g_lo
        a_lo, f_lo, g_lo = a, fa, ga
    return None


def strong_wolfe(fun, x, f0, g, p, alpha0=1.0, c1=1e-4, c2=0.9, max_iter=25, alpha_max=1e10):
    """Step length satisfying the strong Wolfe conditions along ``p``.

    Returns ``(alpha, f, grad)`` or ``None`` on failure.
    """
    g0 = float(g @ p)
    if g0 >= 0:
        return None

    def phi(a):
        fa, ga = fun(x + a * p)
        if not math.isfinite(fa) or not np.all(np.isfinite(ga)):
            return math.inf, math.nan, None
        return fa, float(ga @ p), (fa, ga)

    prev = (0.0, f0, g0)
    a = alpha0
    for i in range(max_iter):
        fa, ga, extra = phi(a)
        if not math.isfinite(fa):
            # overshoot into a non-finite region: bracket with the last good point
            return _backtrack(phi, prev, a, f0, g0, c1, c2)
        if fa > f0 + c1 * a * g0 or (i > 0 and fa >= prev[1]):
            return _finish(_zoom(phi, prev, (a, fa, ga), f0, g0, c1, c2))
        if abs(ga) <= -c2 * g0:
            return a, extra[0], extra[1]
        if ga >= 0:
            return _finish(_zoom(phi, (a, fa, ga), prev, f0, g0, c1, c2))
        prev = (a, fa, ga)
        a = min(2.0 * a, alpha_max)
    return None


def _finish(z):
    if z is None:
        return None
    a, _, extra = z
    return a, extra[0], extra[1]


def _backtrack(phi, prev, a, f0, g0, c1, c2):
    # shrink towards the last finite point until values are finite again, then zoom
    lo = prev
    for _ in range(60):
        a = lo[0] + 0.5 * (a - lo[0])
        fa, ga, extra = phi(a)
        if math.isfinite(fa):
            if fa > f0 + c1 * a * g0 or fa >= lo[1]:
                return _finish(_zoom(phi, lo, (a, fa, ga), f0, g0, c1, c2))
            if abs(ga) <= -c2 * g0:
                return a, extra[0], extra[1]
            if ga >= 0:
                return _finish(_zoom(phi, (a, fa, ga), lo, f0, g0, c1, c2))
            lo = (a, fa, ga)
    return None


def two_loop(g, s_hist, y_hist):
    """Apply the inverse-Hessian approximation to ``g``."""
    q = g.copy()
    alphas = []
    rhos = [1.0 / float(y @ s) for s, y in zip(s_hist, y_hist)]
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rhos)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rhos), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def lbfgs_minimize(objective, x0, max_iters=1000, memory=10, gtol=1e-10, max_restarts=5, rng=None, precision=1e3 * EPS):
    """Minimize ``objective`` from ``x0``.

    Stops when the gradient norm drops below ``gtol``, at the iteration cap,
    or when a failed line search predicted a decrease smaller than
    ``precision * |f|`` (the objective cannot be resolved any further).
    """
    fun = _Counted(objective)
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise ValueError("objective is not finite at the starting point")
    rng = rng if rng is not None else np.random.default_rng(0)
    s_hist, y_hist = [], []
    restarts = 0
    stalled = False
    best = (f, x.copy(), g.copy())
    message = "iteration cap reached"
    it = 0
    while it < max_iters:
        gnorm = float(np.linalg.norm(g))
        if gnorm < gtol:
            message = "gradient norm below tolerance"
            break
        p = -two_loop(g, s_hist, y_hist)
        if float(g @ p) >= 0:
            s_hist, y_hist = [], []
            p = -g
        alpha0 = 1.0 if s_hist else min(1.0, 1.0 / gnorm)
        step = strong_wolfe(fun, x, f, g, p, alpha0=alpha0)
        if step is None:
            if -float(g @ p) <= precision * max(abs(f), 1e-300):
                message = "stationary to working precision"
                stalled = True
                break
            if restarts >= max_restarts:
                message = "line search failed"
                break
            restarts += 1
            s_hist, y_hist = [], []
            scale = 1e-8 * (1.0 + np.abs(best[1]))
            x = best[1] + scale * rng.standard_normal(x.size)
            f, g = fun(x)
            if not math.isfinite(f):
                x, f, g = best[1].copy(), best[0], best[2].copy()
            it += 1
            continue
        alpha, f_new, g_new = step
        s, y = alpha * p, g_new - g
        x, f, g = x + s, f_new, g_new
        if float(s @ y) > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        if f < best[0]:
            best = (f, x.copy(), g.copy())
        it += 1
    f, x, g = best
    gnorm = float(np.linalg.norm(g))
    return LbfgsResult(x, f, gnorm, it, fun.calls, restarts, gnorm < gtol or stalled, message)
