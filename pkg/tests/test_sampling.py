import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from looplab.sampling import (
    DepthDistribution,
    DepthSchedule,
    build_schedule,
    mu_bwd_rule,
    sample_baseline,
    sample_corrected,
    schedule_from_depths,
    truncate,
)

LOGNORMAL = DepthDistribution("poisson-lognormal")
POISSON = DepthDistribution("poisson")


def direct_lambda(dist, mean, rng, size):
    """Independent draw of Lambda(mean) using numpy's own Poisson generator."""
    if dist.kind == "poisson":
        return np.maximum(rng.poisson(mean, size), 1)
    tau = rng.normal(math.log(mean) - 0.5 * dist.sigma**2, dist.sigma, size)
    return rng.poisson(np.exp(tau)) + 1


def test_mu_bwd_rule():
    assert mu_bwd_rule(8) == 4
    assert mu_bwd_rule(1) == 1
    assert mu_bwd_rule(7) == 4
    with pytest.raises(ValueError):
        mu_bwd_rule(0)


def test_distribution_validation():
    with pytest.raises(ValueError):
        DepthDistribution("geometric")
    with pytest.raises(ValueError):
        POISSON.sample(0, np.random.default_rng(0))


@pytest.mark.parametrize("dist", [POISSON, LOGNORMAL])
def test_samples_are_positive_integers(dist):
    draws = dist.sample(1.5, np.random.default_rng(0), 20000)
    assert draws.dtype.kind == "i" and draws.min() >= 1


def test_baseline_k_fixed():
    n, k = sample_baseline(8, 4, LOGNORMAL, 0, size=1000)
    assert np.all(k == 4)
    n1, k1 = sample_baseline(8, 4, LOGNORMAL, 1)
    assert k1 == 4 and n1 >= 1


def test_baseline_floor():
    n, k = sample_baseline(8, 4, LOGNORMAL, 2, size=100_000)
    assert (n + k).min() >= 5


def test_baseline_mean_is_shifted():
    rng = np.random.default_rng(3)
    n, k = sample_baseline(8, 4, LOGNORMAL, rng, size=100_000)
    nc, kc = sample_corrected(8, 4, LOGNORMAL, rng, size=100_000)
    # the +1 shift puts the baseline mean near mu_rec + 1, not mu_rec
    assert abs(np.mean(n + k) - 8) > 0.5
    # and the law itself is compressed relative to the corrected sampler
    hi = 25
    table = np.array([np.bincount(np.minimum(x, hi), minlength=hi + 1)[1:] for x in (n + k, nc + kc)])
    table = table[:, table.sum(axis=0) > 0]
    assert stats.chi2_contingency(table)[1] < 1e-6
    assert np.var(n + k) < np.var(nc + kc)


def test_baseline_requires_positive_shift():
    with pytest.raises(ValueError):
        sample_baseline(4, 4, LOGNORMAL, 0)


def test_truncate_examples():
    assert truncate(3, 4) == (0, 3)
    assert truncate(10, 4) == (6, 4)


def test_corrected_poisson_mean():
    n, k = sample_corrected(8, 4, POISSON, 4, size=100_000)
    assert abs(np.mean(n + k) - 8) < 0.05


def test_corrected_matches_direct_law():
    n, k = sample_corrected(8, 4, POISSON, 5, size=100_000)
    ref = direct_lambda(POISSON, 8, np.random.default_rng(6), 100_000)
    hi = 20
    table = np.array([np.bincount(np.minimum(x, hi), minlength=hi + 1)[1:] for x in (n + k, ref)])
    assert stats.chi2_contingency(table)[1] > 0.01


def test_corrected_emits_short_depths():
    n, k = sample_corrected(8, 4, LOGNORMAL, 7, size=100_000)
    assert np.mean(n + k <= 4) > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_corrected_invariants(mu_rec, mu_bwd, seed):
    n, k = sample_corrected(mu_rec, mu_bwd, LOGNORMAL, seed, size=64)
    T = n + k
    assert np.all(T >= 1) and np.all(k >= 1) and np.all(k <= mu_bwd)
    assert np.all(n == np.maximum(T - mu_bwd, 0))


# --- schedules -------------------------------------------------------------------------


def test_schedule_single_sequence():
    for step in range(10):
        s = build_schedule(1, 8, 4, LOGNORMAL, seed=1, step=step)
        assert s.tau.tolist() == [0]


def test_schedule_equal_depths():
    s = schedule_from_depths([6] * 5, 4)
    assert np.all(s.tau == 0)


def test_schedule_gradient_window():
    s = build_schedule(8, 8, 4, LOGNORMAL, seed=2)
    assert np.all(s.n + s.k == s.T)
    ph = s.phases()
    for i in range(8):
        row = ph[i]
        assert np.all(row[: s.tau[i]] == 0)
        assert np.all(row[s.tau[i] : s.tau[i] + s.n[i]] == 1)
        assert np.all(row[s.T_max - s.k[i] :] == 2)
        assert np.sum(row == 2) == s.k[i]


def test_schedule_replays():
    a = build_schedule(8, 8, 4, LOGNORMAL, seed=3, step=11)
    b = build_schedule(8, 8, 4, LOGNORMAL, seed=3, step=11)
    np.testing.assert_array_equal(a.T, b.T)
    streams = {tuple(build_schedule(8, 8, 4, LOGNORMAL, seed=3, step=st).T) for st in range(20)}
    assert len(streams) > 1


def test_per_micro_batch_mode():
    s = build_schedule(8, 8, 4, LOGNORMAL, seed=4, mode="per-micro-batch")
    assert len(set(s.T.tolist())) == 1 and np.all(s.tau == 0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        DepthSchedule([3], [2], [2], 4)
    with pytest.raises(ValueError):
        DepthSchedule([6], [1], [5], 4)
    with pytest.raises(ValueError):
        build_schedule(0, 8, 4, LOGNORMAL, seed=0)
    with pytest.raises(ValueError):
        build_schedule(2, 8, 4, LOGNORMAL, seed=0, mode="global")


def test_schedule_jsonl_dump():
    s = build_schedule(3, 8, 4, LOGNORMAL, seed=5, step=2)
    buf = io.StringIO()
    s.dump_jsonl(buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(rows) == 3
    assert set(rows[0]) == {"seed", "step", "index", "T", "n", "k", "tau"}
    assert [r["T"] for r in rows] == s.T.tolist()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=12), st.integers(1, 10))
def test_schedule_invariants(depths, mu_bwd):
    s = schedule_from_depths(depths, mu_bwd)
    assert np.all(s.tau >= 0) and np.all(s.k <= mu_bwd)
    ph = s.phases()
    assert np.all((ph > 0).sum(axis=1) == s.T)
    for t in range(s.T_max):
        np.testing.assert_array_equal(s.grad_rows(t), ph[:, t] == 2)
        np.testing.assert_array_equal(s.active(t), ph[:, t] > 0)


def test_baseline_schedule():
    s = build_schedule(16, 8, 4, LOGNORMAL, seed=6, sampler="baseline")
    assert np.all(s.k == 4) and s.T.min() >= 5
    with pytest.raises(ValueError):
        build_schedule(2, 8, 4, LOGNORMAL, seed=0, sampler="other")
