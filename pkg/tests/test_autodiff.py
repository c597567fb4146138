import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infouda import autodiff as ad
from infouda.autodiff import Tensor, ShapeError, grad, hessian_vector_product, value_and_grad

from oracles import central_difference


def _grad_of(fn, x):
    _, g = value_and_grad(fn, x)
    return g


def test_square_gradient_is_two_x():
    g = _grad_of(lambda w: ad.tsum(ad.square(w)), np.array(3.0))
    assert g == pytest.approx(6.0)


def test_matmul_gradient_against_ones():
    a = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    g = _grad_of(lambda w: ad.tsum(ad.matmul(Tensor(a), ad.reshape(w, (2, 1)))), np.zeros(2))
    np.testing.assert_allclose(g, a.sum(axis=0))


def test_cross_entropy_of_uniform_logits_is_log_two():
    ce = ad.softmax_cross_entropy(Tensor(np.zeros((4, 2))), np.array([0, 1, 1, 0]))
    assert ce.item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_log_rejects_nonpositive():
    with pytest.raises(FloatingPointError):
        ad.log(Tensor([1.0, 0.0]))


def test_exp_overflow_is_reported():
    with pytest.raises(FloatingPointError):
        ad.exp(Tensor([1000.0]))


def test_matmul_shape_error_names_extents():
    with pytest.raises(ShapeError, match=r"\(2, 3\) @ \(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_scalar_root_rejected():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        grad(ad.mul(w, 2.0), [w])


def test_unreachable_leaf_gets_zero_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    ga, gb = grad(ad.tsum(a), [a, b])
    np.testing.assert_array_equal(ga.data, np.ones(2))
    np.testing.assert_array_equal(gb.data, np.zeros(3))


def test_shared_subexpression_accumulates():
    # y = x*x + x*x reuses the same node twice
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    sq = ad.mul(x, x)
    (g,) = grad(ad.tsum(ad.add(sq, sq)), [x])
    np.testing.assert_allclose(g.data, 4 * x.data)


def test_tape_is_topologically_ordered():
    x = Tensor(np.arange(3.0), requires_grad=True)
    y = ad.tsum(ad.mul(ad.exp(x), ad.sigmoid(ad.add(x, 1.0))))
    tape = ad.Tape.from_root(y)
    assert tape.is_topological()
    assert tape.order[-1] is y


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 3.0)
    assert y.node is None


def test_backward_maps_leaves():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = Tensor(np.array([5.0]), requires_grad=True)
    grads = ad.backward(ad.tsum(ad.mul(a, b)))
    assert grads[a][0] == 5.0 and grads[b][0] == 2.0


def test_hvp_quadratic_exact_and_fd():
    hess = np.array([[1.0, 0.0], [0.0, 4.0]])

    def loss(w):
        return ad.mul(ad.tsum(ad.mul(w, ad.matmul(ad.reshape(w, (1, 2)), Tensor(hess)).reshape((2,)))), 0.5)

    v = np.array([1.0, 1.0])
    np.testing.assert_allclose(hessian_vector_product(loss, np.zeros(2), v, "exact"), [1.0, 4.0])
    np.testing.assert_allclose(hessian_vector_product(loss, np.zeros(2), v, "fd"), [1.0, 4.0], rtol=1e-6)


def test_hvp_zero_direction_is_zero():
    out = hessian_vector_product(lambda w: ad.tsum(ad.exp(w)), np.ones(3), np.zeros(3))
    np.testing.assert_array_equal(out, np.zeros(3))


def test_gaussian_log_density_matches_scipy():
    from scipy.stats import multivariate_normal
    x = np.array([[0.3, -1.2], [2.0, 0.5]])
    mean, std = np.array([0.1, 0.2]), np.array([0.7, 1.9])
    got = ad.gaussian_log_density(x, mean, std).data
    ref = multivariate_normal(mean, np.diag(std ** 2)).logpdf(x)
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_logsumexp_is_stable_for_large_inputs():
    out = ad.logsumexp(Tensor(np.array([[1000.0, 1000.0]])), axis=1).data
    assert out[0] == pytest.approx(1000.0 + math.log(2.0))


# building blocks for the random-graph finite-difference property
_UNARY = [
    ad.sigmoid,
    ad.softplus,
    lambda t: ad.exp(ad.mul(t, 0.3)),
    ad.square,
    lambda t: ad.log(ad.add(ad.square(t), 1.0)),
    lambda t: ad.div(t, ad.add(ad.square(t), 2.0)),
    ad.neg,
    lambda t: ad.reshape(ad.softmax(ad.reshape(t, (1, t.size)), axis=1), (t.size,)),
]


def random_graph(rng: np.random.Generator, size: int):
    """A scalar function of a length-``size`` vector made from random unary
    chains, a dense layer, broadcasting, indexing and reductions."""
    ops = [int(k) for k in rng.integers(0, len(_UNARY), size=3)]
    mat = rng.standard_normal((size, 3))
    bias = rng.standard_normal(3)
    pick = int(rng.integers(0, size))

    def build(w):
        h = w
        for k in ops:
            h = _UNARY[k](h)
        z = ad.add(ad.matmul(ad.reshape(h, (1, size)), Tensor(mat)), bias)
        out = ad.add(ad.tsum(ad.mul(z, z)), ad.tsum(ad.logsumexp(z, axis=1)))
        out = ad.add(out, ad.mean(ad.mul(w, h)))
        return ad.add(out, ad.mul(ad.getitem(w, pick), ad.getitem(h, pick)))

    return build


def test_random_graphs_match_central_differences():
    rng = np.random.default_rng(20240501)
    worst = 0.0
    for _ in range(100):
        size = int(rng.integers(2, 6))
        fn = random_graph(rng, size)
        x = rng.standard_normal(size)
        got = _grad_of(fn, x)
        ref = central_difference(lambda v: fn(Tensor(v)).item(), x)
        rel = np.linalg.norm(got - ref) / max(np.linalg.norm(ref), 1e-8)
        worst = max(worst, rel)
    assert worst < 1e-4


def test_exact_hvp_matches_finite_difference_of_gradient():
    rng = np.random.default_rng(3)
    for _ in range(10):
        size = int(rng.integers(2, 5))
        fn = random_graph(rng, size)
        x, v = rng.standard_normal(size), rng.standard_normal(size)
        exact = hessian_vector_product(fn, x, v, "exact")
        fd = hessian_vector_product(fn, x, v, "fd")
        assert np.linalg.norm(exact - fd) <= 1e-3 * max(1.0, np.linalg.norm(exact))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=5), st.floats(0.1, 4.0))
def test_hvp_is_linear_in_direction(values, scale):
    x = np.array(values)
    v = np.linspace(-1, 1, x.size)
    fn = lambda w: ad.tsum(ad.softplus(ad.mul(w, w)))
    a = hessian_vector_product(fn, x, v, "exact")
    b = hessian_vector_product(fn, x, scale * v, "exact")
    np.testing.assert_allclose(b, scale * a, rtol=1e-10, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4))
def test_broadcast_sum_adjoint(rows, cols):
    # <sum_to(g), x> == <g, broadcast(x)> for the (rows, cols) <- (cols,) pair
    rng = np.random.default_rng(rows * 10 + cols)
    x = rng.standard_normal(cols)
    g = rng.standard_normal((rows, cols))
    lhs = float(ad.sum_to(Tensor(g), (cols,)).data @ x)
    rhs = float(np.sum(g * ad.broadcast_to(Tensor(x), (rows, cols)).data))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)
