import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sepmodel.optim import check_gradient, lbfgs_ascent


def concave_quadratic(A, c):
    def fun(x):
        d = x - c
        return -0.5 * d @ A @ d, -(A @ d)
    return fun


def test_quadratic_maximum():
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    c = np.array([1.0, -2.0])
    res = lbfgs_ascent(concave_quadratic(A, c), np.zeros(2), tol=1e-14, grad_tol=1e-10)
    assert res.converged
    np.testing.assert_allclose(res.x, c, atol=1e-7)


def test_negated_rosenbrock():
    def fun(x):
        a, b = x
        f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
        g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
        return -f, -g

    res = lbfgs_ascent(fun, np.array([-1.2, 1.0]), max_iters=2000, tol=1e-15, grad_tol=1e-9)
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_trace_is_nondecreasing(seed, dim):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((dim, dim))
    A = M @ M.T + 0.1 * np.eye(dim)
    res = lbfgs_ascent(concave_quadratic(A, rng.standard_normal(dim)), rng.standard_normal(dim) * 5)
    assert np.all(np.diff(res.trace) >= 0)


def test_nonfinite_region_is_avoided():
    # log barrier: the first unit step jumps out of the domain
    def fun(x):
        if x[0] <= 0:
            return -np.inf, np.zeros(1)
        return np.log(x[0]) - x[0] / 50, np.array([1 / x[0] - 1 / 50])

    res = lbfgs_ascent(fun, np.array([0.5]), tol=1e-14, grad_tol=1e-10)
    assert res.x[0] == pytest.approx(50.0, rel=1e-5)
    assert np.all(np.isfinite(res.trace))


def test_nonfinite_start():
    res = lbfgs_ascent(lambda x: (np.nan, x), np.zeros(2))
    assert not res.converged


def test_iteration_limit():
    A = np.diag([1.0, 1e4])
    res = lbfgs_ascent(concave_quadratic(A, np.ones(2)), np.zeros(2), max_iters=2, tol=0, grad_tol=0)
    assert not res.converged and res.iterations == 2


def test_check_gradient():
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    fun = concave_quadratic(A, np.ones(2))
    assert check_gradient(fun, np.array([0.2, 3.0])) < 1e-7

    def wrong(x):
        v, g = fun(x)
        return v, g * np.array([2.0, 1.0])

    assert check_gradient(wrong, np.array([0.2, 3.0])) > 0.5
