import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cbvit import numerics as nx
from cbvit.numerics import InvalidInputError, NonFiniteError, Tensor, backward, finite_diff, relative_error


def grad_of(fn, value):
    """Reverse-mode gradient of scalar fn at value."""
    x = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    backward(fn(x))
    return x.grad


def fd_of(fn, value, eps=1e-5):
    return finite_diff(lambda th: fn(Tensor(th)).item(), np.array(value, dtype=np.float64), eps)


# -- softmax_rows ---------------------------------------------------------------


def test_softmax_zero_row_is_uniform():
    np.testing.assert_allclose(nx.softmax_rows(np.zeros((1, 3))), [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_ln2():
    np.testing.assert_allclose(nx.softmax_rows(np.array([[0.0, math.log(2.0)]])), [[1 / 3, 2 / 3]], atol=1e-15)


def test_softmax_tiny_scale_is_nearly_uniform():
    out = nx.softmax_rows(np.array([[5.0, -3.0]]), lam=1e-12)
    np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-9)


def test_softmax_rejects_nonfinite_and_bad_scale():
    with pytest.raises(InvalidInputError):
        nx.softmax_rows(np.array([[0.0, np.nan]]))
    with pytest.raises(InvalidInputError):
        nx.softmax_rows(np.array([[0.0, np.inf]]))
    with pytest.raises(InvalidInputError):
        nx.softmax_rows(np.zeros((1, 2)), lam=0.0)


def test_softmax_large_logits_stable():
    out = nx.softmax_rows(np.array([[1000.0, 999.0, -1000.0]]))
    assert np.all(np.isfinite(out))
    assert abs(out.sum() - 1) < 1e-12


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 12)), elements=st.floats(-50, 50))


@given(finite_rows, st.floats(0.01, 5.0), st.floats(-100, 100))
@settings(max_examples=200, deadline=None)
def test_softmax_rows_are_distributions_and_shift_invariant(s, lam, shift):
    a = nx.softmax_rows(s, lam)
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
    b = nx.softmax_rows(s + shift, lam)
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- layer_norm -----------------------------------------------------------------


def test_layer_norm_constant_vector_is_zero():
    out = nx.layer_norm(np.full(5, 3.7), np.ones(5), np.zeros(5), eps=1e-6)
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_layer_norm_hand_examples():
    np.testing.assert_allclose(nx.layer_norm([1.0, -1.0], np.ones(2), np.zeros(2), eps=0.0), [1.0, -1.0])
    np.testing.assert_allclose(nx.layer_norm([3.0, 5.0], [2.0, 2.0], [1.0, 1.0], eps=0.0), [-1.0, 3.0])


def test_layer_norm_shape_mismatch():
    with pytest.raises(InvalidInputError):
        nx.layer_norm(np.ones(3), np.ones(2), np.zeros(3))


@given(arrays(np.float64, st.integers(2, 16), elements=st.floats(-1e3, 1e3)))
@settings(max_examples=100, deadline=None)
def test_layer_norm_output_has_zero_mean(x):
    out = nx.layer_norm(x, np.ones(x.size), np.zeros(x.size), eps=1e-5)
    assert abs(out.mean()) < 1e-10


# -- gelu -------------------------------------------------------------------------


def test_gelu_values():
    assert nx.gelu(0.0) == 0.0
    assert abs(nx.gelu(10.0) - 10.0) < 1e-6
    # 1 * Phi(1) with Phi(1) = (1 + erf(1/sqrt 2)) / 2
    assert abs(nx.gelu(1.0) - 0.5 * (1 + math.erf(1 / math.sqrt(2)))) < 1e-15
    assert abs(nx.gelu(1.0) - 0.841345) < 1e-5


def test_gelu_is_exact_not_tanh():
    x = 1.5
    tanh_form = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    exact = x * 0.5 * (1 + math.erf(x / math.sqrt(2)))
    assert nx.gelu(x) == pytest.approx(exact, abs=1e-15)
    assert abs(nx.gelu(x) - tanh_form) > 1e-6


# -- backward ---------------------------------------------------------------------


def test_backward_linear():
    g = grad_of(lambda x: (2.0 * x).sum(), np.ones((3, 4)))
    np.testing.assert_array_equal(g, np.full((3, 4), 2.0))


def test_backward_square():
    g = grad_of(lambda x: (x * x).sum(), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(InvalidInputError):
        backward(x * 2.0)
    with pytest.raises(InvalidInputError):
        backward(Tensor(np.ones(3)).sum())


def test_backward_shared_subexpression_accumulates():
    # f = sum(x*x + x*x) uses x four times through two paths
    g = grad_of(lambda x: (x * x + x * x).sum(), [1.0, -2.0])
    np.testing.assert_allclose(g, [4.0, -8.0])


def test_cross_entropy_gradient_matches_finite_diff():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 5))
    labels = rng.integers(0, 5, 6)
    f = lambda t: nx.cross_entropy(t, labels, label_smoothing=0.1)
    assert relative_error(grad_of(f, logits), fd_of(f, logits)).max() < 1e-4


def test_nonfinite_results_raise():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([800.0])).exp()
    with pytest.raises(NonFiniteError):
        Tensor(np.array([0.0, 1.0])).log()


# -- finite_diff ------------------------------------------------------------------


def test_finite_diff_examples():
    np.testing.assert_array_equal(finite_diff(lambda th: 4.2, np.ones(3)), np.zeros(3))
    np.testing.assert_allclose(finite_diff(lambda th: th.sum(), np.arange(4.0)), np.ones(4), atol=1e-9)
    np.testing.assert_allclose(finite_diff(lambda th: th[0] * th[1], [3.0, 5.0]), [5.0, 3.0], atol=1e-7)


# -- every differentiable composite vs finite differences -------------------------

rng = np.random.default_rng(1234)
W = rng.normal(size=(5, 4))
GAMMA, BETA = rng.normal(size=4), rng.normal(size=4)
LABELS = np.array([0, 3, 1])

COMPOSITES = {
    "matmul": lambda x: ((x @ W.T) ** 2).sum(),
    "batched_matmul": lambda x: (x.reshape(3, 1, 4) @ x.reshape(3, 4, 1)).sum(),
    "softmax": lambda x: (nx.softmax_rows(x, 0.7) * np.arange(4.0)).sum(),
    "layer_norm": lambda x: (nx.layer_norm(x, GAMMA, BETA, 1e-5) * W[:3, :4]).sum(),
    "gelu": lambda x: (nx.gelu(x) * W[:3, :4]).sum(),
    "cross_entropy": lambda x: nx.cross_entropy(x, LABELS),
    "mean_max": lambda x: (x.mean(axis=0) * x.max(axis=0)).sum(),
    "transpose_getitem": lambda x: (x.transpose()[1:3] * 1.5).sum() + (x[:, 0] ** 3).sum(),
    "concat_broadcast": lambda x: (nx.concat([x, x[0:1] * 2.0], axis=0) * W[:4, :4]).sum()
    + x[0:1].broadcast_to((3, 4)).sum(),
    "division": lambda x: (x / (x * x + 1.0)).sum(),
    "exp_log": lambda x: ((x * x + 1.0).log() + (0.1 * x).exp()).sum(),
}


@pytest.mark.parametrize("name", sorted(COMPOSITES))
def test_composite_gradients(name):
    f = COMPOSITES[name]
    x0 = np.random.default_rng(7).normal(size=(3, 4))
    err = relative_error(grad_of(f, x0), fd_of(f, x0))
    assert err.max() < 1e-4, (name, err.max())


def test_purity_bit_identical():
    x = np.random.default_rng(3).normal(size=(4, 6))
    a = nx.layer_norm(nx.gelu(x), np.ones(6), np.zeros(6))
    b = nx.layer_norm(nx.gelu(x), np.ones(6), np.zeros(6))
    assert a.tobytes() == b.tobytes()
