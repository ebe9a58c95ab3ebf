"""Stochastic loop depth: distributions, truncation samplers, batch schedules.

Two truncation samplers split a depth into ``n`` steps run without gradients
followed by ``k`` steps with gradients:

``sample_baseline``
    draws the no-grad part from ``Lambda(mu_rec - mu_bwd)`` and always adds
    ``k = mu_bwd`` gradient steps, which shifts and compresses the realized
    depth distribution.
``sample_corrected``
    draws the total depth ``T ~ Lambda(mu_rec)`` and truncates:
    ``n = max(T - mu_bwd, 0)``, ``k = min(T, mu_bwd)``.

Poisson variates come from inverting the CDF at uniforms, and each sequence
in a batch gets its own Philox stream keyed by ``(seed, step, index)``.
Schedules therefore replay exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from looplab import kernels

KINDS = ("poisson", "poisson-lognormal")
MODES = ("per-sequence", "per-micro-batch")
SAMPLERS = ("corrected", "baseline")


@dataclass(frozen=True)
class DepthDistribution:
    kind: str = "poisson-lognormal"
    sigma: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"depth distribution kind must be one of {KINDS}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def sample(self, mean, rng, size=None):
        """Integer depths >= 1 with location ``mean``.

        ``poisson``: ``max(Poisson(mean), 1)``.
        ``poisson-lognormal``: ``Poisson(exp(tau)) + 1`` with
        ``tau ~ N(log(mean) - sigma^2 / 2, sigma)``.
        """
        if mean <= 0:
            raise ValueError("distribution mean must be positive")
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape)) if shape else 1
        if self.kind == "poisson":
            lam = np.full(count, float(mean))
            draws = np.maximum(kernels.poisson_inverse(lam, rng.random(count)), 1)
        else:
            tau = rng.normal(math.log(mean) - 0.5 * self.sigma**2, self.sigma, count)
            draws = kernels.poisson_inverse(np.exp(tau), rng.random(count)) + 1
        return int(draws[0]) if size is None else draws.reshape(shape)


def mu_bwd_rule(mu_rec):
    if mu_rec < 1:
        raise ValueError("mu_rec must be >= 1")
    return math.ceil(mu_rec / 2)


def _as_rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_baseline(mu_rec, mu_bwd, dist, rng, size=None):
    """Fixed-gradient-window sampler; returns ``(n, k)``."""
    if mu_rec <= mu_bwd:
        raise ValueError("baseline sampler needs mu_rec > mu_bwd")
    n = dist.sample(mu_rec - mu_bwd, _as_rng(rng), size)
    k = mu_bwd if size is None else np.full_like(n, mu_bwd)
    return n, k


def truncate(T, mu_bwd):
    """Split total depth ``T`` into ``(n, k)`` with ``k = min(T, mu_bwd)``."""
    T = np.asarray(T)
    n, k = np.maximum(T - mu_bwd, 0), np.minimum(T, mu_bwd)
    return (int(n), int(k)) if T.ndim == 0 else (n, k)


def sample_corrected(mu_rec, mu_bwd, dist, rng, size=None):
    """Total-depth sampler with truncation; returns ``(n, k)``."""
    if mu_rec < 1:
        raise ValueError("mu_rec must be >= 1")
    return truncate(dist.sample(mu_rec, _as_rng(rng), size), mu_bwd)


def sequence_rng(seed, step, index):
    """Counter-based stream for sequence ``index`` of batch ``step``."""
    ss = np.random.SeedSequence(seed, spawn_key=(step, index))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class DepthSchedule:
    """Per-sequence depths aligned to finish together at ``T_max``.

    Sequence ``i`` idles (carries its state unchanged) for ``tau[i]`` steps,
    runs ``n[i]`` steps without gradients, then ``k[i]`` steps with gradients.
    """

    T: np.ndarray
    n: np.ndarray
    k: np.ndarray
    mu_bwd: int
    seed: int = 0
    step: int = 0

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.int64)
        self.n = np.asarray(self.n, dtype=np.int64)
        self.k = np.asarray(self.k, dtype=np.int64)
        if not (self.T.shape == self.n.shape == self.k.shape) or self.T.ndim != 1:
            raise ValueError("T, n, k must be equal-length vectors")
        if np.any(self.n + self.k != self.T) or np.any(self.k > self.mu_bwd) or np.any(self.n < 0):
            raise ValueError("schedule violates n + k = T, 0 <= k <= mu_bwd")

    @property
    def batch_size(self):
        return self.T.size

    @property
    def T_max(self):
        return int(self.T.max())

    @property
    def tau(self):
        return self.T_max - self.T

    @property
    def max_k(self):
        return int(self.k.max())

    def active(self, t):
        """Rows that update their state at step ``t``."""
        return t >= self.tau

    def grad_rows(self, t):
        """Rows whose step ``t`` is recorded for backpropagation."""
        return t >= self.T_max - self.k

    def phases(self):
        """(batch, T_max) array of 0 idle / 1 no-grad / 2 grad."""
        t = np.arange(self.T_max)[None, :]
        out = np.zeros((self.batch_size, self.T_max), dtype=np.int8)
        out[t >= self.tau[:, None]] = 1
        out[t >= (self.T_max - self.k)[:, None]] = 2
        return out

    def records(self):
        return [
            {"seed": self.seed, "step": self.step, "index": i, "T": int(T), "n": int(n), "k": int(k), "tau": int(tau)}
            for i, (T, n, k, tau) in enumerate(zip(self.T, self.n, self.k, self.tau))
        ]

    def dump_jsonl(self, fh):
        for rec in self.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def schedule_from_depths(depths, mu_bwd, seed=0, step=0):
    n, k = truncate(np.asarray(depths, dtype=np.int64), mu_bwd)
    return DepthSchedule(depths, n, k, mu_bwd, seed, step)


def build_schedule(batch_size, mu_rec, mu_bwd, dist, seed, step=0, mode="per-sequence", sampler="corrected"):
    """Schedule for one batch.

    ``per-sequence`` draws each row's depth from its own stream;
    ``per-micro-batch`` draws one depth (from the row-0 stream) for all rows.
    ``sampler`` picks the corrected or the baseline truncation.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if sampler not in SAMPLERS:
        raise ValueError(f"sampler must be one of {SAMPLERS}")
    rows = range(batch_size) if mode == "per-sequence" else [0]
    draws = []
    for i in rows:
        rng = sequence_rng(seed, step, i)
        if sampler == "corrected":
            draws.append(sample_corrected(mu_rec, mu_bwd, dist, rng))
        else:
            draws.append(sample_baseline(mu_rec, mu_bwd, dist, rng))
    if mode == "per-micro-batch":
        draws = draws * batch_size
    n, k = (np.array(v, dtype=np.int64) for v in zip(*draws))
    return DepthSchedule(n + k, n, k, mu_bwd, seed, step)
