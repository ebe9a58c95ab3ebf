import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from looplab import autodiff as ad
from looplab.flops import (
    effective_params,
    flops_per_token,
    loop_params,
    prelude_coda_params,
    tokens_for_budget,
    training_flops,
)
from looplab.model import LoopedModel, ModelConfig
from looplab.sampling import schedule_from_depths
from looplab.trainer import compute_gradients


def cfg(**kw):
    base = dict(vocab_size=32, d_model=8, n_heads=2, seq_len=10)
    base.update(kw)
    return ModelConfig(**base)


def test_single_layer_looped_ten_times():
    c = cfg(n_prelude=0, n_coda=0, injection="addition")
    m = LoopedModel(c)
    layer = sum(p.size for k, p in m.params.items() if k.startswith("recurrent.0."))
    n_loop, n_pc, n_eff = effective_params(c, 10)
    assert n_loop == layer
    assert n_eff - n_pc == 10 * layer


def test_single_loop_is_unshared_count():
    for mode in ("addition", "concatenation", "parcae-diagonal"):
        c = cfg(injection=mode)
        m = LoopedModel(c)
        _, _, n_eff = effective_params(c, 1)
        # everything except the input embedding, with wte counted once as unembedding
        assert n_eff == m.num_params()


@pytest.mark.parametrize("mode", ["addition", "concatenation", "parcae-diagonal"])
def test_enumeration_oracle(mode):
    c = cfg(injection=mode)
    m = LoopedModel(c)
    loop, pc = 0, 0
    for name, p in m.params.items():
        if name.startswith("recurrent.") or name in ("inj.log_A", "inj.delta_raw", "inj.B", "inj.W"):
            loop += p.size
        else:
            pc += p.size  # wte counted here as the unembedding
    assert loop_params(c) == loop
    assert prelude_coda_params(c) == pc


def test_full_backprop_total():
    c = cfg()
    b = training_flops(c, 6, 6, 1000)
    _, _, n_eff = effective_params(c, 6)
    assert b.N_hat1 == 0
    assert b.total == 6 * n_eff * 1000 + b.attention


def test_half_truncation_recurrent_share():
    c = cfg()
    n_loop = loop_params(c)
    full = training_flops(c, 8, 4, 1000)
    # strip the prelude/coda share and attention, leaving the recurrent matmul FLOPs
    rec = full.total - full.attention - 6 * prelude_coda_params(c) * 1000
    assert rec == 4 * (8 * n_loop) * 1000


def _instrumented(c, mu_rec, mu_bwd, batch):
    m = LoopedModel(c, seed=0)
    r = np.random.default_rng(0)
    x = r.integers(0, c.vocab_size, size=(batch, c.seq_len))
    sched = schedule_from_depths([mu_rec] * batch, mu_bwd)
    with ad.count_flops() as counter:
        compute_gradients(m, x, np.roll(x, -1, 1), sched, m.init_state(x.shape, 1))
    return counter


@pytest.mark.parametrize("mode", ["parcae-diagonal", "concatenation", "addition"])
@pytest.mark.parametrize("mu_rec,mu_bwd", [(4, 2), (3, 3), (5, 1)])
def test_formula_matches_instrumented_counter(mode, mu_rec, mu_bwd):
    c = cfg(injection=mode)
    batch = 100
    counter = _instrumented(c, mu_rec, mu_bwd, batch)
    D = batch * c.seq_len
    assert D == 1000
    est = training_flops(c, mu_rec, mu_bwd, D).total
    assert abs(est - counter.total) / counter.total < 0.02


def test_isoflop_inversion():
    c = cfg()
    for F in (1e12, 3.7e15, 1e18):
        for mu in (1, 2, 4, 8):
            D = tokens_for_budget(c, mu, (mu + 1) // 2, F)
            assert abs(training_flops(c, mu, (mu + 1) // 2, D).total / F - 1) < 1e-3


def test_validation():
    with pytest.raises(ValueError):
        training_flops(cfg(), 2, 3, 10)
    with pytest.raises(ValueError):
        effective_params(cfg(), 0)
    with pytest.raises(ValueError):
        tokens_for_budget(cfg(), 2, 1, 0)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 12), st.integers(1, 12), st.integers(1, 10**9),
    st.sampled_from(["addition", "concatenation", "parcae-diagonal"]),
)
def test_monotone_in_depths_and_tokens(mu_rec, mu_bwd, D, mode):
    mu_bwd = min(mu_bwd, mu_rec)
    c = cfg(injection=mode)
    base = training_flops(c, mu_rec, mu_bwd, D).total
    assert training_flops(c, mu_rec + 1, mu_bwd, D).total > base
    if mu_bwd < mu_rec:
        assert training_flops(c, mu_rec, mu_bwd + 1, D).total > base
    assert training_flops(c, mu_rec, mu_bwd, D + 1).total > base


@pytest.mark.parametrize(
    "knob,bigger",
    [("d_model", 12), ("n_prelude", 2), ("n_recurrent", 2), ("n_coda", 2), ("seq_len", 11), ("vocab_size", 33), ("mlp_ratio", 5)],
)
def test_monotone_in_config_knobs(knob, bigger):
    small = training_flops(cfg(), 4, 2, 1000).total
    large = training_flops(cfg(**{knob: bigger}), 4, 2, 1000).total
    assert large > small


def test_more_depth_means_fewer_tokens():
    c = cfg()
    D = [tokens_for_budget(c, mu, (mu + 1) // 2, 1e15) for mu in (1, 2, 4, 8, 16)]
    assert all(a > b for a, b in zip(D, D[1:]))


def test_per_token_consistent():
    c = cfg()
    assert flops_per_token(c, 4, 2) * 1000 == pytest.approx(training_flops(c, 4, 2, 1000).total, rel=1e-15)
