from fractions import Fraction
from itertools import permutations

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from quasispde.errors import DimensionMismatch
from quasispde.wick_hermite import (
    hermite,
    hermite_binomial_check,
    hermite_coefficients,
    smeared_gaussian_setup,
    wick_hermite_identity_check,
    wick_orthogonality_mc,
    wick_product,
)

X, C = sympy.symbols("X C")


def sympy_hermite(N):
    # probabilists' Hermite He_N(x) rescaled: H_N(X, C) = C^{N/2} He_N(X / sqrt(C))
    x = sympy.Symbol("x")
    he = sympy.hermite_prob(N, x)
    return sympy.expand(sympy.simplify(C ** sympy.Rational(N, 2) * he.subs(x, X / sympy.sqrt(C))))


def test_small_values():
    assert hermite(2, 3, 2) == 7
    assert hermite(3, 2, 1) == 2
    assert hermite(4, 2, 1) == -5
    assert hermite(0, 5, 1) == 1
    assert hermite(1, 5, 1) == 5


@pytest.mark.parametrize("N", range(9))
def test_recursion_matches_symbolic_expansion(N):
    poly = sympy.Poly(sympy_hermite(N), X, C)
    expected = {k: int(v) for k, v in poly.as_dict().items()}
    assert expected == hermite_coefficients(N)
    for x in range(-4, 5):
        for c in range(-3, 4):
            assert hermite(N, Fraction(x), Fraction(c)) == poly.eval({X: x, C: c})


def test_negative_order_rejected():
    with pytest.raises(ValueError):
        hermite(-1, 1.0, 1.0)


def test_vectorised_hermite():
    x = np.linspace(-2, 2, 7)
    np.testing.assert_allclose(hermite(3, x, 0.5), x**3 - 1.5 * x)


@pytest.mark.parametrize("N", range(7))
def test_binomial_identity_random(N):
    rng = np.random.default_rng(N)
    x, y = rng.uniform(-3, 3, (2, 1000))
    c, d = rng.uniform(0, 2, (2, 1000))
    lhs, rhs = hermite_binomial_check(N, x, y, c, d)
    assert np.all(np.abs(lhs - rhs) <= 1e-10 * (1 + np.abs(lhs)))


def test_binomial_identity_degenerate_second_argument():
    lhs, rhs = hermite_binomial_check(5, Fraction(3, 2), Fraction(0), Fraction(2), Fraction(0))
    assert lhs == rhs == hermite(5, Fraction(3, 2), Fraction(2))


@given(
    st.integers(0, 6),
    st.fractions(-5, 5, max_denominator=7),
    st.fractions(-5, 5, max_denominator=7),
    st.fractions(-3, 3, max_denominator=7),
    st.fractions(-3, 3, max_denominator=7),
)
def test_binomial_identity_exact(N, x, y, c, d):
    lhs, rhs = hermite_binomial_check(N, x, y, c, d)
    assert lhs == rhs


def test_wick_product_base_cases():
    cov = np.array([[1.0, 0.3], [0.3, 2.0]])
    assert wick_product([1.7], cov[:1, :1]) == 1.7
    assert wick_product([1.7, -0.4], cov) == pytest.approx(1.7 * -0.4 - 0.3)


def test_wick_product_equal_entries_is_hermite():
    z, rho = 1.3, 0.6
    cov = np.full((3, 3), rho)
    assert wick_product([z] * 3, cov) == pytest.approx(z**3 - 3 * rho * z)
    cov4 = np.full((4, 4), rho)
    assert wick_product([z] * 4, cov4) == pytest.approx(hermite(4, z, rho))


def test_wick_product_shape_errors():
    with pytest.raises(DimensionMismatch):
        wick_product([1.0, 2.0], np.eye(3))
    with pytest.raises(DimensionMismatch):
        wick_product(1.0, np.eye(1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000))
def test_wick_product_permutation_symmetric(N, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((N, N))
    cov = A @ A.T
    z = rng.standard_normal(N)
    base = wick_product(z, cov)
    for perm in list(permutations(range(N)))[:24]:
        p = list(perm)
        assert wick_product(z[p], cov[np.ix_(p, p)]) == pytest.approx(base, rel=1e-12, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000))
def test_wick_derivative_identity(N, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((N, N))
    cov = A @ A.T / N
    z = rng.standard_normal(N)
    h = 1e-4
    for ell in range(N):
        up, dn = z.copy(), z.copy()
        up[ell] += h
        dn[ell] -= h
        fd = (wick_product(up, cov) - wick_product(dn, cov)) / (2 * h)
        keep = [i for i in range(N) if i != ell]
        exact = wick_product(z[keep], cov[np.ix_(keep, keep)])
        assert abs(fd - exact) <= 1e-6 * (1 + abs(exact))


def test_wick_product_batched():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((50, 3))
    cov = np.eye(3) * 0.5 + 0.1
    batch = wick_product(z, cov)
    single = np.array([wick_product(row, cov) for row in z])
    np.testing.assert_allclose(batch, single)


@pytest.mark.parametrize("N", [0, 1, 2, 3])
def test_wick_hermite_identity_pathwise(N):
    kernel, values, cov = smeared_gaussian_setup(n=8, delta=0.25, t=0.02, seed=3)
    lhs, rhs = wick_hermite_identity_check(N, kernel, values, cov)
    assert abs(lhs - rhs) <= 1e-8 * (1 + abs(lhs))


def test_wick_hermite_identity_shape_check():
    with pytest.raises(DimensionMismatch):
        wick_hermite_identity_check(2, np.ones(3), np.ones(4), np.eye(4))


@pytest.mark.parametrize("N,M", [(1, 2), (2, 3), (1, 3)])
def test_orthogonality(N, M):
    mean, se = wick_orthogonality_mc(N, M, replicas=100_000, seed=11)
    assert abs(mean) <= 4 * se


def test_norm_is_factorial():
    mean, se = wick_orthogonality_mc(2, 2, replicas=100_000, seed=5)
    assert abs(mean - 2) <= 4 * se
    mean, se = wick_orthogonality_mc(3, 3, replicas=200_000, seed=6)
    assert abs(mean - 6) <= 4 * se
