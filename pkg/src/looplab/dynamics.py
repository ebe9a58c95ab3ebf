"""Linear time-invariant surrogate of the looped residual stream.

Dropping the nonlinear block contribution leaves ``h' = A_bar h + B_bar e``.
This module holds the diagonal negative parameterization of the continuous
``A``, its discretization (zero-order hold for ``A``, Euler for ``B``),
spectral-radius estimation, the stable / marginal / unstable classification,
and exact rollouts of the linear recurrence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from looplab import kernels

STABILITY_TOL = 1e-9

# Bounds on delta * exp(log_A) so that exp(-x) stays strictly inside (0, 1) in
# double precision: below ~1e-16 exp(-x) rounds to 1.0, above ~745 it rounds to 0.
DECAY_MIN = 1e-15
DECAY_MAX = 700.0

INJECTION_MODES = ("addition", "concatenation", "parcae-diagonal")


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class InjectionParams:
    """Continuous-time injection parameters.

    ``A = Diag(-exp(log_A))`` and ``delta = softplus(delta_raw)``; ``B`` maps the
    prelude output into the state and ``C`` reads the state out to the coda.
    """

    log_A: np.ndarray
    delta_raw: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        self.log_A = np.asarray(self.log_A, dtype=np.float64)
        self.delta_raw = np.asarray(self.delta_raw, dtype=np.float64)
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        d_h = self.log_A.shape[0]
        if self.delta_raw.shape != (d_h,) or self.B.shape[0] != d_h or self.C.shape[1] != d_h:
            raise ValueError("inconsistent injection parameter shapes")

    @property
    def d_h(self):
        return self.log_A.shape[0]

    @property
    def delta(self):
        return softplus(self.delta_raw)

    @property
    def A(self):
        """Diagonal of the continuous transition matrix (strictly negative)."""
        return -np.exp(self.log_A)

    @classmethod
    def init(cls, d_h, d_e=None, d_c=None, rng=None, std=None):
        """Random init: delta ~ U[0.01, 0.1], exp(log_A) ~ exp(U[ln .5, ln 2]), B, C ~ N(0, std^2)."""
        rng = np.random.default_rng(rng)
        d_e = d_h if d_e is None else d_e
        d_c = d_h if d_c is None else d_c
        std = math.sqrt(2.0 / (5.0 * d_h)) if std is None else std
        log_A = rng.uniform(math.log(0.5), math.log(2.0), d_h)
        delta_raw = inverse_softplus(rng.uniform(0.01, 0.1, d_h))
        B = rng.normal(0.0, std, (d_h, d_e))
        C = rng.normal(0.0, std, (d_c, d_h))
        return cls(log_A, delta_raw, B, C)


@dataclass
class DiscretizedSystem:
    """Diagonal discrete system: ``A_bar`` holds the diagonal, entries in (0, 1)."""

    A_bar: np.ndarray
    B_bar: np.ndarray

    def __post_init__(self):
        self.A_bar = np.asarray(self.A_bar, dtype=np.float64)
        self.B_bar = np.atleast_2d(np.asarray(self.B_bar, dtype=np.float64))

    def matrix(self):
        return np.diag(self.A_bar)


@dataclass
class LinearSystem:
    """Dense ``h' = A h + B e`` with no constraint on ``A`` (baseline injections)."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        if self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")

    def matrix(self):
        return self.A


class Regime(str, Enum):
    STABLE = "stable"
    MARGINAL = "marginally-stable"
    UNSTABLE = "unstable"


@dataclass(frozen=True)
class StabilityRegime:
    regime: Regime
    rho: float


def decay_rate(log_A, delta_raw):
    """``delta * exp(log_A)``, clamped so the ZOH exponential is strictly in (0, 1)."""
    x = softplus(delta_raw) * np.exp(np.minimum(log_A, DECAY_MAX))
    return np.clip(x, DECAY_MIN, DECAY_MAX)


def discretize(params: InjectionParams) -> DiscretizedSystem:
    """ZOH for the diagonal ``A`` (``exp(delta * A)``) and Euler for ``B`` (``delta * B``)."""
    A_bar = np.exp(-decay_rate(params.log_A, params.delta_raw))
    B_bar = params.delta[:, None] * params.B
    return DiscretizedSystem(A_bar, B_bar)


def spectral_radius(M, max_iter=5000, tol=1e-12, dense_max=64, rng=0):
    """Largest eigenvalue magnitude of a square matrix.

    Diagonal inputs (1-D arrays or diagonal matrices) are exact. Matrices up to
    ``dense_max`` go to the dense eigensolver. Larger ones use power iteration on
    ``M`` itself: the growth ``||M^w v|| / ||v||`` over a window ``w`` is tracked
    with renormalization, and its ``w``-th root settles on rho even for complex
    dominant pairs. Non-convergence falls back to the dense solver.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        return float(np.max(np.abs(M))) if M.size else 0.0
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"spectral_radius needs a square matrix, got {M.shape}")
    if M.size == 0:
        return 0.0
    if not np.any(M - np.diag(np.diagonal(M))):
        return float(np.max(np.abs(np.diagonal(M))))
    if M.shape[0] <= dense_max:
        return float(np.max(np.abs(np.linalg.eigvals(M))))
    rho = power_iteration(M, max_iter=max_iter, tol=tol, rng=rng)
    if rho is None:
        return float(np.max(np.abs(np.linalg.eigvals(M))))
    return rho


def power_iteration(M, max_iter=5000, tol=1e-12, window=8, rng=0):
    """Windowed power-iteration estimate of rho(M); ``None`` if it fails to settle."""
    v = np.random.default_rng(rng).standard_normal(M.shape[0])
    v /= np.linalg.norm(v)
    prev = None
    log_growth = 0.0
    for it in range(1, max_iter + 1):
        v = M @ v
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        log_growth += math.log(nv)
        v /= nv
        if it % window == 0:
            est = math.exp(log_growth / window)
            log_growth = 0.0
            if prev is not None and abs(est - prev) <= tol * max(est, 1e-300):
                return est
            prev = est
    return None


def classify(rho, tol=STABILITY_TOL) -> StabilityRegime:
    if rho < 0 or not math.isfinite(rho) and not rho == math.inf:
        raise ValueError(f"spectral radius must be nonnegative, got {rho}")
    if rho < 1.0 - tol:
        regime = Regime.STABLE
    elif rho > 1.0 + tol:
        regime = Regime.UNSTABLE
    else:
        regime = Regime.MARGINAL
    return StabilityRegime(regime, float(rho))


def recast_injection(mode, weights):
    """Linearized ``(A_bar, B_bar)`` pair of an injection, as dense matrices.

    ``addition``: ``weights`` is the state width ``d_h`` (or any object with
    ``shape[0] == d_h``), giving identities. ``concatenation``: ``weights`` is
    ``W`` of shape (d_h, d_h + d_e), split by columns into ``(W1, W2)``.
    ``parcae-diagonal``: ``weights`` is an :class:`InjectionParams`.
    """
    if mode == "addition":
        d = int(weights) if np.isscalar(weights) else np.asarray(weights).shape[0]
        return np.eye(d), np.eye(d)
    if mode == "concatenation":
        W = np.asarray(weights, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] <= W.shape[0]:
            raise ValueError(f"concatenation weight must be (d_h, d_h + d_e), got {W.shape}")
        d = W.shape[0]
        return W[:, :d].copy(), W[:, d:].copy()
    if mode == "parcae-diagonal":
        if not isinstance(weights, InjectionParams):
            raise ValueError("parcae-diagonal recast needs InjectionParams")
        sys = discretize(weights)
        return np.diag(sys.A_bar), sys.B_bar
    raise ValueError(f"unknown injection mode {mode!r}")


def _input_term(sys, e):
    e = np.asarray(e, dtype=np.float64)
    return e @ sys.B_bar.T if isinstance(sys, DiscretizedSystem) else e @ sys.B.T


def linear_fixed_point(sys, e):
    """Fixed point ``h*`` of ``h' = A_bar h + B_bar e``."""
    u = _input_term(sys, e)
    if isinstance(sys, DiscretizedSystem):
        if np.any(sys.A_bar == 1.0):
            raise ValueError("A_bar has a unit entry: no unique fixed point")
        return u / (1.0 - sys.A_bar)
    I = np.eye(sys.A.shape[0])
    if abs(np.linalg.det(I - sys.A)) == 0.0:
        raise ValueError("I - A is singular: no unique fixed point")
    return np.linalg.solve(I - sys.A, u.T).T


def state_norm(h):
    """l2 norm of a state vector; for (..., d) arrays the mean per-row norm."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim <= 1:
        return float(np.linalg.norm(h))
    return float(np.mean(np.linalg.norm(h, axis=-1)))


def simulate_linear(sys, e, h0, T):
    """Roll out ``T`` steps; returns (trajectory of T+1 states, per-step state norms)."""
    if T < 0:
        raise ValueError("T must be nonnegative")
    h0 = np.asarray(h0, dtype=np.float64)
    u = np.broadcast_to(_input_term(sys, e), h0.shape)
    if isinstance(sys, DiscretizedSystem):
        traj = kernels.diag_scan(sys.A_bar, u.reshape(-1, h0.shape[-1]), h0.reshape(-1, h0.shape[-1]), T)
        traj = traj.reshape((T + 1,) + h0.shape)
    else:
        traj = np.empty((T + 1,) + h0.shape)
        traj[0] = h0
        for t in range(T):
            traj[t + 1] = traj[t] @ sys.A.T + u
    norms = np.array([state_norm(h) for h in traj])
    return traj, norms
