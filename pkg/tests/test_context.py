import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cbvit.context import aggregate_context, apply_context, cb, cb_gate, cb_hybrid, cb_s
from cbvit.numerics import InvalidInputError, Tensor, backward, finite_diff, relative_error

X = np.array([[1.0, 0.0], [3.0, 2.0]])


def test_cb_examples():
    np.testing.assert_array_equal(cb(X), [[1.5, 0.5], [2.5, 1.5]])
    c = np.tile([[4.0, -2.0, 7.0]], (5, 1))
    np.testing.assert_array_equal(cb(c), c)
    one = np.array([[3.0, -1.0]])
    np.testing.assert_array_equal(cb(one), one)


def test_cb_one_line_form():
    x = np.random.default_rng(0).normal(size=(2, 7, 5))
    np.testing.assert_allclose(cb(x), 0.5 * x + 0.5 * x.mean(axis=1, keepdims=True), atol=1e-15)


def test_cb_empty_sequence():
    with pytest.raises(InvalidInputError):
        cb(np.zeros((0, 3)))


def test_cb_s_examples():
    np.testing.assert_array_equal(cb_s(X, np.zeros(2)), X)
    np.testing.assert_array_equal(cb_s(X, np.ones(2)), [[3.0, 1.0], [5.0, 3.0]])
    np.testing.assert_array_equal(cb_s(X, np.array([1.0, 0.0])), [[3.0, 0.0], [5.0, 2.0]])
    with pytest.raises(InvalidInputError):
        cb_s(X, np.ones(3))


def test_cb_gate_examples():
    x = np.random.default_rng(1).normal(size=(4, 3))
    x0 = x.copy()
    x0[0] = 0.0
    np.testing.assert_array_equal(cb_gate(x0), x0)
    x1 = x.copy()
    x1[0] = 1.0
    np.testing.assert_array_equal(cb_gate(x1), 2 * x1)
    np.testing.assert_array_equal(cb_gate(np.array([[1.0, -1.0], [3.0, 4.0]]))[1], [6.0, 0.0])
    with pytest.raises(InvalidInputError):
        cb_gate(np.zeros((0, 2)))


def test_cb_hybrid_examples():
    x = np.random.default_rng(2).normal(size=(4, 3))
    x[0] = 0.0
    np.testing.assert_allclose(cb_hybrid(x), cb(x), atol=1e-15)
    x[0] = 1.0
    np.testing.assert_allclose(cb_hybrid(x), x + cb(x), atol=1e-15)
    y = np.array([[1.0, 1.0], [1.0, 0.0]])
    # mean = [1, 0.5]; cb = [[1, 0.75], [1, 0.25]]; row1 gate x1*x0 = [1, 0]
    np.testing.assert_allclose(cb(y), [[1.0, 0.75], [1.0, 0.25]])
    np.testing.assert_allclose(cb_hybrid(y)[1], [2.0, 0.25])


def test_aggregate_context():
    np.testing.assert_array_equal(aggregate_context(X, "mean"), [2.0, 1.0])
    np.testing.assert_array_equal(aggregate_context(X, "max"), [3.0, 2.0])
    np.testing.assert_array_equal(aggregate_context(X, "class"), X[0])
    with pytest.raises(InvalidInputError):
        aggregate_context(X, "median")


def test_class_aggregation_leaves_class_row_unchanged():
    x = np.random.default_rng(3).normal(size=(5, 4))
    out = cb(x, aggregation="class")
    np.testing.assert_allclose(out[0], x[0], atol=1e-15)
    np.testing.assert_allclose(out[1:], (x[1:] + x[0]) / 2, atol=1e-15)


def test_exclude_class_from_mean():
    x = np.random.default_rng(4).normal(size=(5, 4))
    out = cb(x, exclude_class=True)
    np.testing.assert_allclose(out, 0.5 * x + 0.5 * x[1:].mean(axis=0), atol=1e-15)


def test_apply_context_dispatch():
    t = Tensor(X)
    assert apply_context(t, "none") is t
    np.testing.assert_array_equal(apply_context(t, "cb").data, cb(X))
    with pytest.raises(InvalidInputError):
        apply_context(t, "cb_s")
    with pytest.raises(InvalidInputError):
        apply_context(t, "squeeze")


tokens = arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 6)), elements=st.floats(-1e3, 1e3))


@given(tokens)
@settings(max_examples=200, deadline=None)
def test_cb_mean_preservation_and_half_contraction(x):
    out = cb(x)
    mu = x.mean(axis=0)
    np.testing.assert_allclose(out.mean(axis=0), mu, atol=1e-12 * (1 + np.abs(x).max()))
    dev_in = np.linalg.norm(x - mu, axis=1)
    dev_out = np.linalg.norm(out - mu, axis=1)
    np.testing.assert_allclose(dev_out, 0.5 * dev_in, atol=1e-12 * (1 + np.abs(x).max()))


def test_repeated_cb_shrinks_deviation_geometrically():
    x = np.random.default_rng(5).normal(size=(6, 3))
    mu = x.mean(axis=0)
    y = x
    for k in range(1, 6):
        y = cb(y)
        np.testing.assert_allclose(np.linalg.norm(y - mu, axis=1), np.linalg.norm(x - mu, axis=1) / 2**k, atol=1e-12)


@given(tokens, st.floats(-10, 10), st.floats(-10, 10))
@settings(max_examples=100, deadline=None)
def test_cb_is_linear(x, alpha, beta):
    y = np.random.default_rng(0).normal(size=x.shape)
    lhs = cb(alpha * x + beta * y)
    rhs = alpha * cb(x) + beta * cb(y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(x).max()) * (1 + abs(alpha) + abs(beta)))


@given(tokens)
@settings(max_examples=100, deadline=None)
def test_cb_s_unit_scale_adds_exact_mean(x):
    # bitwise: each row is x_i + column-mean, nothing else
    np.testing.assert_array_equal(cb_s(x, np.ones(x.shape[1])), x + x.mean(axis=0))


SCALE = np.random.default_rng(9).normal(size=4)
OPS = {
    "cb": lambda t: cb(t),
    "cb_max": lambda t: cb(t, aggregation="max"),
    "cb_s": lambda t: cb_s(t, SCALE),
    "cb_gate": lambda t: cb_gate(t),
    "cb_hybrid": lambda t: cb_hybrid(t),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_context_op_gradients(name):
    op = OPS[name]
    w = np.random.default_rng(11).normal(size=(5, 4))
    x0 = np.random.default_rng(12).normal(size=(5, 4))
    f = lambda t: (op(t) * w).sum()
    t = Tensor(x0, requires_grad=True)
    backward(f(t))
    fd = finite_diff(lambda th: f(Tensor(th)).item(), x0)
    assert relative_error(t.grad, fd).max() < 1e-6
