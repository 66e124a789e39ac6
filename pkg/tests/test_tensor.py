import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hst import tensor as T
from hst.tensor import Tensor, grad_check, no_grad

from oracles import central_difference, erf_series, matmul_loops, softmax_explicit

RNG = np.random.default_rng(1234)


def rel_err(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))


def analytic_grad(fn, x):
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    fn(t).backward()
    return t.grad


def numeric_grad(fn, x):
    return central_difference(lambda v: float(fn(Tensor(v)).data), x)


# -- forward oracles --------------------------------------------------------------


def test_matmul_identity_and_scalar():
    x = RNG.standard_normal((3, 5))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    a, b = RNG.standard_normal((3, 4)), RNG.standard_normal((4, 2))
    assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - matmul_loops(a, b))) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    assert T.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]
    out = T.softmax(Tensor([0.0, -1e9])).data
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)
    v = RNG.standard_normal(8) * 3
    assert np.max(np.abs(T.softmax(Tensor(v)).data - softmax_explicit(v))) < 1e-10


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(6)), Tensor(np.zeros(6))
    # the slice mean is off by an ulp, which 1/sqrt(eps) amplifies to ~1e-13
    assert np.max(np.abs(T.layer_norm(Tensor(np.full((2, 6), 3.7)), one, zero).data)) < 1e-12
    assert np.all(T.layer_norm(Tensor(np.full((2, 6), 0.5)), one, zero).data == 0.0)
    x = RNG.standard_normal((4, 16)) * 5 + 2
    y = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(y.var(axis=-1), x.var(axis=-1) / (x.var(axis=-1) + 1e-5), atol=1e-12)
    z = T.layer_norm(Tensor(x), Tensor(np.zeros(16)), Tensor(np.full(16, 5.0))).data
    assert np.all(z == 5.0)


def test_gelu_examples():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert T.gelu(Tensor([10.0])).data[0] == pytest.approx(10.0, abs=1e-12)
    phi1 = 0.5 * (1.0 + erf_series(1.0 / math.sqrt(2.0)))
    assert T.gelu(Tensor([1.0])).data[0] == pytest.approx(phi1, abs=1e-14)


def test_linear_examples():
    x = RNG.standard_normal((2, 3, 4))
    b = RNG.standard_normal(4)
    assert np.array_equal(T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    out = T.linear(Tensor(np.zeros((2, 3, 4))), Tensor(RNG.standard_normal((4, 4))), Tensor(b)).data
    assert np.array_equal(out, np.broadcast_to(b, (2, 3, 4)))
    w = RNG.standard_normal((4, 5))
    b5 = RNG.standard_normal(5)
    composed = T.add(T.matmul(Tensor(x), Tensor(w)), Tensor(b5)).data
    assert np.array_equal(T.linear(Tensor(x), Tensor(w), Tensor(b5)).data, composed)


# -- gradients ------------------------------------------------------------------------

ELEMENTWISE = {
    "add": lambda t: T.sum_(T.add(t, t * 0.5)),
    "mul": lambda t: T.sum_(T.mul(t, Tensor(np.linspace(-1, 2, 12).reshape(3, 4)))),
    "neg": lambda t: T.sum_(T.mul(T.neg(t), t)),
    "gelu": lambda t: T.sum_(T.gelu(t)),
    "reshape": lambda t: T.sum_(T.mul(T.reshape(t, (4, 3)), Tensor(np.arange(12.0).reshape(4, 3)))),
    "transpose": lambda t: T.sum_(T.mul(T.transpose(t), Tensor(np.arange(12.0).reshape(4, 3)))),
    "slice": lambda t: T.sum_(T.mul(t[1:, ::2], t[1:, ::2])),
    "gather": lambda t: T.sum_(T.mul(t[np.array([0, 2, 2])], t[np.array([1, 1, 0])])),
    "concat": lambda t: T.sum_(T.mul(T.concat([t, t * 2.0], axis=0), Tensor(np.arange(24.0).reshape(6, 4)))),
    "roll": lambda t: T.sum_(T.mul(T.roll(t, (1, -2), (0, 1)), Tensor(np.arange(12.0).reshape(3, 4)))),
    "take": lambda t: T.sum_(T.mul(T.take(t, np.array([[0, 2], [2, 1]])), Tensor(np.arange(16.0).reshape(2, 2, 4)))),
    "mean": lambda t: T.mean(T.mul(t, t), axis=1).sum(),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradients(name):
    fn = ELEMENTWISE[name]
    x = RNG.standard_normal((3, 4))
    assert rel_err(analytic_grad(fn, x), numeric_grad(fn, x)) < 1e-6


def _chain_matmul(t):
    return T.sum_(T.gelu(T.matmul(t, Tensor(np.linspace(-1, 1, 20).reshape(4, 5)))))


def _chain_softmax(t):
    w = Tensor(np.linspace(-2, 2, 12).reshape(3, 4))
    return T.sum_(T.mul(T.softmax(t * 2.0), w))


def _chain_layer_norm(t):
    g = Tensor(np.linspace(0.5, 1.5, 4))
    b = Tensor(np.linspace(-0.2, 0.2, 4))
    return T.sum_(T.mul(T.layer_norm(t, g, b), Tensor(np.arange(12.0).reshape(3, 4))))


def _chain_linear(t):
    w = Tensor(np.linspace(-1, 1, 8).reshape(4, 2))
    return T.sum_(T.mul(T.linear(t, w, Tensor([0.1, -0.3])), T.linear(t, w)))


@pytest.mark.parametrize("fn", [_chain_matmul, _chain_softmax, _chain_layer_norm, _chain_linear],
                         ids=["matmul", "softmax", "layer_norm", "linear"])
def test_chain_gradients(fn):
    x = RNG.standard_normal((3, 4))
    assert rel_err(analytic_grad(fn, x), numeric_grad(fn, x)) < 1e-5


def test_weight_gradients_for_parametrized_ops():
    x = Tensor(RNG.standard_normal((2, 3, 4)))
    w = Tensor(RNG.standard_normal((4, 5)), requires_grad=True)
    b = Tensor(RNG.standard_normal(5), requires_grad=True)
    g = Tensor(RNG.standard_normal(5) + 1, requires_grad=True)
    beta = Tensor(RNG.standard_normal(5), requires_grad=True)

    def f():
        y = T.layer_norm(T.linear(x, w, b), g, beta)
        return T.sum_(T.mul(T.gelu(y), y))

    assert grad_check(f, [w, b, g, beta]) < 1e-6


def test_matmul_backward_formula():
    a = Tensor(RNG.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(RNG.standard_normal((4, 2)), requires_grad=True)
    dc = RNG.standard_normal((3, 2))
    T.matmul(a, b).backward(dc)
    assert np.allclose(a.grad, dc @ b.data.T, atol=1e-14)
    assert np.allclose(b.grad, a.data.T @ dc, atol=1e-14)


def test_batched_matmul_broadcast_gradient():
    a = Tensor(RNG.standard_normal((2, 3, 4)), requires_grad=True)
    b = Tensor(RNG.standard_normal((4, 5)), requires_grad=True)
    assert grad_check(lambda: T.sum_(T.gelu(T.matmul(a, b))), [a, b]) < 1e-6


def test_gradient_accumulation_is_sum_of_uses():
    x = RNG.standard_normal(5)
    g1 = analytic_grad(lambda t: T.sum_(T.gelu(t)), x)
    c = Tensor(RNG.standard_normal(5))
    g2 = analytic_grad(lambda t: T.sum_(T.mul(t, c)), x)
    both = analytic_grad(lambda t: T.add(T.sum_(T.gelu(t)), T.sum_(T.mul(t, c))), x)
    assert np.array_equal(both, g1 + g2)


def test_diamond_graph_visits_each_node_once():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * 2.0
    z = T.add(y, y)  # dz/dx = 4
    T.sum_(z).backward()
    assert x.grad.tolist() == [4.0]


def test_grad_check_examples():
    x = Tensor(RNG.standard_normal((3, 4)), requires_grad=True)
    assert grad_check(lambda: T.sum_(x), [x], h=1e-3) < 1e-10
    assert np.all(x.grad == 1.0)
    assert grad_check(lambda: T.sum_(T.softmax(x)), [x]) < 1e-8
    assert np.max(np.abs(x.grad)) < 1e-12


def test_grad_check_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        grad_check(lambda: x * 2.0, [x])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = T.gelu(x)
    assert not y.requires_grad and y._parents == ()


def test_f32_stays_f32():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    y = T.layer_norm(T.gelu(x * np.float64(2.0)), Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32)))
    assert y.dtype == np.float32


def test_check_finite():
    with pytest.raises(T.NumericError):
        T.check_finite(np.array([1.0, np.nan]))


# -- properties -----------------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 9), elements=finite), st.floats(-1e3, 1e3))
def test_softmax_shift_invariance(v, c):
    a = T.softmax(Tensor(v)).data
    b = T.softmax(Tensor(v + c)).data
    assert abs(a.sum() - 1.0) < 1e-6
    assert np.all(a > 0) or np.all(a >= 0)
    assert np.max(np.abs(a - b)) < 1e-12 or np.max(np.abs(a - b)) < 1e-12 * max(1.0, abs(c))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_matmul_associativity(m, k, n, p, seed):
    r = np.random.default_rng(seed)
    a, b, c = r.standard_normal((m, k)), r.standard_normal((k, n)), r.standard_normal((n, p))
    left = T.matmul(T.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
    right = T.matmul(Tensor(a), T.matmul(Tensor(b), Tensor(c))).data
    assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_layer_norm_gradient_property(seed):
    x = np.random.default_rng(seed).standard_normal((2, 5)) * 3
    assert rel_err(analytic_grad(_chain_layer_norm_5, x), numeric_grad(_chain_layer_norm_5, x)) < 1e-5


def _chain_layer_norm_5(t):
    return T.sum_(T.mul(T.layer_norm(t, Tensor(np.ones(5)), Tensor(np.zeros(5))), Tensor(np.arange(10.0).reshape(2, 5))))
