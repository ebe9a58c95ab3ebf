import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from looplab import autodiff as ad
from looplab import kernels
from looplab.autodiff import Graph, Parameter, Tensor, backward, finite_diff_check


def _rng(seed=0):
    return np.random.default_rng(seed)


# --- matmul ------------------------------------------------------------------


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, b.data)


def test_matmul_hand_product():
    out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_gradient_matches_finite_differences():
    r = _rng(1)
    a, b = r.normal(size=(5, 7)), r.normal(size=(7, 3))
    w = r.normal(size=(5, 3))
    err = finite_diff_check(lambda x, y: ad.sum(ad.matmul(x, y) * w), [a, b])
    assert err < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# --- rms_norm ----------------------------------------------------------------


@pytest.mark.parametrize("c", [3.5, -2.0])
def test_rms_norm_constant_vector(c):
    y = ad.rms_norm(Tensor(np.full(6, c)), Tensor(np.ones(6)), eps=0.0)
    np.testing.assert_allclose(y.data, np.full(6, math.copysign(1.0, c)), rtol=0, atol=1e-15)


def test_rms_norm_zero_vector():
    y = ad.rms_norm(Tensor(np.zeros(5)), Tensor(np.ones(5)), eps=1e-5)
    assert np.all(y.data == 0.0)


def test_rms_norm_unit_rms():
    x = _rng(2).normal(size=8)
    y = ad.rms_norm(Tensor(x), Tensor(np.ones(8)), eps=0.0).data
    assert abs(math.sqrt(np.mean(y * y)) - 1.0) < 1e-9


def test_rms_norm_gain_shape_checked():
    with pytest.raises(ValueError):
        ad.rms_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)))


# --- attention ---------------------------------------------------------------


def test_attention_single_position_returns_v():
    r = _rng(3)
    q, k, v = (Tensor(r.normal(size=(1, 4))) for _ in range(3))
    out = ad.causal_attention(q, k, v)
    np.testing.assert_array_equal(out.data, v.data)


def test_attention_zero_qk_is_prefix_average():
    v = _rng(4).normal(size=(5, 4))
    out = ad.causal_attention(Tensor(np.zeros((5, 4))), Tensor(np.zeros((5, 4))), Tensor(v))
    expect = np.cumsum(v, axis=0) / np.arange(1, 6)[:, None]
    np.testing.assert_allclose(out.data, expect, rtol=0, atol=1e-14)


def test_attention_is_causal():
    r = _rng(5)
    q, k, v = r.normal(size=(3, 4, 4, 6)).copy()
    base = ad.causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    for i in range(4):
        q2, k2, v2 = q.copy(), k.copy(), v.copy()
        q2[i + 1 :] += 5.0
        k2[i + 1 :] -= 3.0
        v2[i + 1 :] *= -7.0
        out = ad.causal_attention(Tensor(q2), Tensor(k2), Tensor(v2)).data
        np.testing.assert_array_equal(out[: i + 1], base[: i + 1])


def test_attention_odd_head_dim_rejected_with_rope():
    x = Tensor(np.ones((3, 5)))
    with pytest.raises(ValueError):
        ad.causal_attention(x, x, x)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        ad.causal_attention(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))))


# --- pointwise and loss ------------------------------------------------------


def test_relu_squared_values():
    out = ad.relu_squared(Tensor([-3.0, 2.0]))
    assert out.data.tolist() == [0.0, 4.0]


def test_cross_entropy_uniform_logits():
    loss = ad.cross_entropy(Tensor(np.zeros((4, 16))), [0, 5, 9, 15])
    assert abs(loss.item() - math.log(16)) < 1e-14


def test_cross_entropy_gradient():
    r = _rng(6)
    logits = r.normal(size=(3, 16))
    targets = r.integers(0, 16, size=3)
    assert finite_diff_check(lambda x: ad.cross_entropy(x, targets), [logits]) < 1e-6


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        ad.embedding(Parameter(np.zeros((3, 2))), [1, 3])


# --- backward ----------------------------------------------------------------


def test_backward_sum_is_ones():
    x = Parameter(_rng(7).normal(size=(3, 4)))
    with Graph() as g:
        loss = ad.sum(x)
    np.testing.assert_array_equal(backward(g, loss)[x], np.ones((3, 4)))


def test_backward_sum_of_squares():
    x = Parameter(_rng(8).normal(size=5))
    with Graph() as g:
        loss = ad.sum(x * x)
    np.testing.assert_array_equal(backward(g, loss)[x], 2 * x.data)


def test_backward_twice_rejected():
    x = Parameter(np.ones(3))
    with Graph() as g:
        loss = ad.sum(x * x)
    backward(g, loss)
    with pytest.raises(ad.GraphError):
        backward(g, loss)
    with pytest.raises(ad.GraphError):
        with g:
            pass


def test_backward_non_scalar_rejected():
    x = Parameter(np.ones(3))
    with Graph() as g:
        y = x * 2.0
    with pytest.raises(ad.GraphError):
        backward(g, y)


def test_non_grad_leaf_absent():
    x = Parameter(np.ones(3))
    c = Tensor(np.full(3, 2.0))
    with Graph() as g:
        loss = ad.sum(x * c)
    grads = backward(g, loss)
    assert c not in grads and set(grads) == {x}


def test_no_grad_records_nothing():
    x = Parameter(np.ones(3))
    with Graph() as g:
        with ad.no_grad():
            y = x * 3.0
        assert len(g) == 0
        assert not y.requires_grad


def test_non_finite_forward_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1000.0]))


# --- finite_diff_check self-tests --------------------------------------------


def test_fd_check_quadratic():
    assert finite_diff_check(lambda x: ad.sum(x * x), [np.array([3.0])], eps=1e-5) < 1e-9


def test_fd_check_rms_norm_composite():
    r = _rng(9)
    x, gain, w = r.normal(size=(3, 6)), r.normal(size=6), r.normal(size=(3, 6))
    err = finite_diff_check(lambda a, b: ad.sum(ad.rms_norm(a, b, eps=1e-6) * w), [x, gain])
    assert err < 1e-6


def test_fd_check_detects_corrupted_gradient():
    x = np.array([1.5, -0.7, 2.0])
    bad = [2 * x * 1.1]
    err = finite_diff_check(lambda t: ad.sum(t * t), [x], grads=bad)
    assert abs(err - 0.1 / 1.1) < 1e-6


def test_fd_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: ad.sum(t), [np.ones(2)], eps=0.0)


# --- every differentiable op on several shapes --------------------------------

SHAPES = [(4,), (3, 5), (2, 3, 4)]


def _weighted(out, seed=11):
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum(out * w)


UNARY = {
    "exp": lambda x: ad.exp(x * 0.3),
    "softplus": ad.softplus,
    "relu_squared": ad.relu_squared,
    "clip": lambda x: ad.clip(x, -0.9, 0.8),
    "rms_norm": lambda x: ad.rms_norm(x, eps=1e-6),
    "transpose": ad.transpose,
    "mean_last": lambda x: ad.mean(x, axis=-1),
    "reshape": lambda x: ad.reshape(x, (-1,)),
}


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, shape):
    x = _rng(12).normal(size=shape)
    if name == "clip":
        # keep entries off the kinks
        x = np.where(np.abs(x + 0.9) < 1e-3, x + 0.01, x)
        x = np.where(np.abs(x - 0.8) < 1e-3, x + 0.01, x)
    if name == "relu_squared":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    assert finite_diff_check(lambda t: _weighted(UNARY[name](t)), [x]) < 1e-5


@pytest.mark.parametrize("shape", SHAPES)
def test_binary_broadcast_gradients(shape):
    r = _rng(13)
    a, b = r.normal(size=shape), r.normal(size=shape[-1:])
    for op in (ad.add, ad.sub, ad.mul):
        assert finite_diff_check(lambda x, y: _weighted(op(x, y)), [a, b]) < 1e-5


@pytest.mark.parametrize("shape", SHAPES)
def test_concat_where_gradients(shape):
    r = _rng(14)
    a, b = r.normal(size=shape), r.normal(size=shape)
    mask = r.random(shape) < 0.5
    assert finite_diff_check(lambda x, y: _weighted(ad.concat([x, y], axis=-1)), [a, b]) < 1e-5
    assert finite_diff_check(lambda x, y: _weighted(ad.where(mask, x, y)), [a, b]) < 1e-5


@pytest.mark.parametrize("lead", [(), (2,), (2, 3)])
def test_matmul_batched_gradients(lead):
    r = _rng(15)
    a, b = r.normal(size=lead + (3, 4)), r.normal(size=(4, 2))
    assert finite_diff_check(lambda x, y: _weighted(ad.matmul(x, y)), [a, b]) < 1e-5


@pytest.mark.parametrize("shape", [(3, 4), (2, 5, 4), (2, 2, 6, 8)])
def test_attention_gradients(shape):
    r = _rng(16)
    q, k, v = (r.normal(size=shape) for _ in range(3))
    fn = lambda a, b, c: _weighted(ad.causal_attention(a, b, c))  # noqa: E731
    assert finite_diff_check(fn, [q, k, v]) < 1e-5


def test_embedding_gradient():
    r = _rng(17)
    w = r.normal(size=(6, 3))
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    assert finite_diff_check(lambda t: _weighted(ad.embedding(t, ids)), [w]) < 1e-5


@pytest.mark.parametrize("rows", [1, 3, 7])
def test_rms_norm_with_gain_gradients(rows):
    r = _rng(18 + rows)
    x, gain = r.normal(size=(rows, 5)), r.normal(size=5)
    assert finite_diff_check(lambda a, b: _weighted(ad.rms_norm(a, b)), [x, gain]) < 1e-5


# --- determinism and backends --------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_forward_deterministic(n, half, seed):
    r = np.random.default_rng(seed)
    q, k, v = (Tensor(r.normal(size=(n, 2 * half))) for _ in range(3))
    a = ad.causal_attention(q, k, v).data
    b = ad.causal_attention(q, k, v).data
    np.testing.assert_array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_attention_causal_property(n, seed):
    r = np.random.default_rng(seed)
    q, k, v = r.normal(size=(3, n, 4))
    i = int(r.integers(0, n - 1))
    base = ad.causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    q[i + 1 :], k[i + 1 :], v[i + 1 :] = r.normal(size=(3, n - i - 1, 4))
    out = ad.causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_array_equal(out[: i + 1], base[: i + 1])


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")
def test_backends_agree():
    py, cy = kernels.backend_module("python"), kernels.backend_module("cython")
    r = _rng(20)
    x, g, gain = r.normal(size=(9, 8)), r.normal(size=(9, 8)), r.normal(size=8)
    y1, inv1 = py.rms_norm_fwd(x, gain, 1e-6)
    y2, inv2 = cy.rms_norm_fwd(x, gain, 1e-6)
    np.testing.assert_allclose(y1, y2, rtol=1e-13, atol=1e-14)
    for a, b in zip(py.rms_norm_bwd(g, x, gain, inv1), cy.rms_norm_bwd(g, x, gain, inv2)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
    q, k, v, d = (np.ascontiguousarray(r.normal(size=(3, 7, 4))) for _ in range(4))
    o1, p1 = py.attention_fwd(q, k, v, 0.5)
    o2, p2 = cy.attention_fwd(q, k, v, 0.5)
    np.testing.assert_allclose(o1, o2, rtol=1e-12, atol=1e-13)
    for a, b in zip(py.attention_bwd(d, q, k, v, p1, 0.5), cy.attention_bwd(d, q, k, v, p2, 0.5)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
    logits, t = r.normal(size=(5, 11)), r.integers(0, 11, size=5)
    l1, s1 = py.cross_entropy_fwd(logits, t)
    l2, s2 = cy.cross_entropy_fwd(logits, t)
    np.testing.assert_allclose(l1, l2, rtol=1e-13)
    np.testing.assert_allclose(py.cross_entropy_bwd(logits, t, s1, 0.2), cy.cross_entropy_bwd(logits, t, s2, 0.2), atol=1e-15)
    lam, u = r.uniform(0.1, 30, 500), r.random(500)
    np.testing.assert_array_equal(py.poisson_inverse(lam, u), cy.poisson_inverse(lam, u))
    res = r.normal(scale=2e-3, size=50)
    h1, h2 = py.huber(res, 1e-3), cy.huber(res, 1e-3)
    assert abs(h1[0] - h2[0]) < 1e-15
    np.testing.assert_array_equal(h1[1], h2[1])
    a, b, h0 = r.random(4), r.normal(size=(3, 4)), r.normal(size=(3, 4))
    np.testing.assert_array_equal(py.diag_scan(a, b, h0, 6), cy.diag_scan(a, b, h0, 6))
