import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quasispde.errors import DimensionMismatch
from quasispde.pairings import (
    Pairing,
    PairingClass,
    PolynomialFunctional,
    count_pairings,
    double_factorial,
    enumerate_pairings,
    gaussian_ibp_expand,
    ibp_lhs_monte_carlo,
    isserlis_moment,
    pairings_to_json,
    random_covariance,
)


def brute_force_pairings(J):
    """All perfect matchings via permutations, deduplicated."""
    J = sorted(J)
    seen = set()
    for perm in itertools.permutations(J):
        blocks = tuple(sorted(tuple(sorted(perm[i : i + 2])) for i in range(0, len(perm), 2)))
        seen.add(blocks)
    return seen


def brute_filter(J, cls):
    return {p for p in brute_force_pairings(J) if all(cls.allows(i, j) for i, j in p)}


def test_small_counts():
    assert len(enumerate_pairings([1, 2, 3, 4])) == 3
    assert enumerate_pairings([1, 2], PairingClass("P2")) == []
    assert len(enumerate_pairings([1, 2, 3, 4], PairingClass("PN", N=2))) == 2
    assert count_pairings(range(1, 7)) == 15
    assert enumerate_pairings([1, 2, 3]) == []
    assert [p.blocks for p in enumerate_pairings([])] == [()]


@pytest.mark.parametrize("size", [0, 2, 4, 6, 8, 10])
def test_count_is_double_factorial(size):
    assert count_pairings(range(1, size + 1)) == double_factorial(size - 1)


@pytest.mark.parametrize("size", [2, 4, 6, 8])
@pytest.mark.parametrize(
    "cls", [PairingClass("P"), PairingClass("P2"), PairingClass("PN", N=2), PairingClass("PN", N=3), PairingClass("PN", N=3, flavor="strict")]
)
def test_restricted_counts_match_brute_force(size, cls):
    J = range(1, size + 1)
    got = {p.blocks for p in enumerate_pairings(J, cls)}
    assert got == brute_filter(J, cls)


def test_order_is_lexicographic_and_duplicate_free():
    ps = [p.blocks for p in enumerate_pairings(range(1, 9))]
    assert ps == sorted(ps)
    assert len(set(ps)) == len(ps)


def test_pairing_validation():
    with pytest.raises(ValueError):
        Pairing(((1, 2),), (1, 2, 3, 4))
    with pytest.raises(ValueError):
        PairingClass("Q")
    with pytest.raises(ValueError):
        enumerate_pairings([1, 1])


def test_json_export_is_stable():
    cls = PairingClass("P2")
    text = pairings_to_json(enumerate_pairings(range(1, 5), cls), cls)
    data = json.loads(text)
    assert data["count"] == 2
    assert data["pairings"] == [[[1, 3], [2, 4]], [[1, 4], [2, 3]]]
    assert text == pairings_to_json(enumerate_pairings(range(1, 5), cls), cls)


def test_isserlis_basics():
    assert isserlis_moment(np.eye(1), [0, 0, 0, 0]) == 3
    C = np.array([[1.0, 0.2, 0.1], [0.2, 1.0, 0.3], [0.1, 0.3, 1.0]])
    assert isserlis_moment(C, [0, 1, 2]) == 0
    C4 = random_covariance(4, np.random.default_rng(0))
    expect = C4[0, 1] * C4[2, 3] + C4[0, 2] * C4[1, 3] + C4[0, 3] * C4[1, 2]
    assert isserlis_moment(C4, [0, 1, 2, 3]) == pytest.approx(expect)


def test_isserlis_monte_carlo():
    rng = np.random.default_rng(1)
    C = random_covariance(4, rng)
    L = np.linalg.cholesky(C)
    S = rng.standard_normal((1_000_000, 4)) @ L.T
    prod = S.prod(axis=1)
    se = prod.std(ddof=1) / np.sqrt(prod.size)
    assert abs(prod.mean() - isserlis_moment(C, [0, 1, 2, 3])) <= 4 * se


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=0, max_size=6), st.integers(0, 1000))
def test_isserlis_equals_pairing_sum(indices, seed):
    C = random_covariance(3, np.random.default_rng(seed))
    if len(indices) % 2:
        assert isserlis_moment(C, indices) == 0
        return
    total = 0.0
    for p in enumerate_pairings(range(1, len(indices) + 1)):
        total += np.prod([C[indices[i - 1], indices[j - 1]] for i, j in p.blocks])
    assert isserlis_moment(C, indices) == pytest.approx(total, rel=1e-12, abs=1e-12)


def test_polynomial_functional():
    F = PolynomialFunctional({(2, 0): 3.0, (1, 1): -1.0, (0, 0): 0.5}, 2)
    assert F.degree == 2
    assert F(np.array([2.0, 1.0])) == pytest.approx(12 - 2 + 0.5)
    dF = F.derivative([0])
    assert dF.terms == {(1, 0): 6.0, (0, 1): -1.0}
    C = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert F.expectation(C) == pytest.approx(3 * 2 - 0.5 + 0.5)
    with pytest.raises(DimensionMismatch):
        PolynomialFunctional({(1,): 1.0}, 2)


def test_plain_constant_functional():
    C = random_covariance(3, np.random.default_rng(2))
    F = PolynomialFunctional({(0,): 1.0}, 1)
    assert gaussian_ibp_expand(F, C, 2, "plain") == pytest.approx(C[1, 2])


def test_plain_matches_isserlis():
    # E[X1^2 Z1 Z2] by Isserlis directly
    C = random_covariance(3, np.random.default_rng(3))
    F = PolynomialFunctional({(2,): 1.0}, 1)
    assert gaussian_ibp_expand(F, C, 2, "plain") == pytest.approx(isserlis_moment(C, [0, 0, 1, 2]))


def test_wick_pairs_linear_functional_is_zero():
    # E[X (Z1 Z2 - C12)] vanishes: odd degree
    C = random_covariance(3, np.random.default_rng(4))
    F = PolynomialFunctional({(1,): 1.0}, 1)
    assert gaussian_ibp_expand(F, C, 1, "wick_pairs") == pytest.approx(0.0, abs=1e-14)


def test_wick_blocks_quadratic_exact():
    # E[X^2 (Z1<>Z2)] = 2 C(X,Z1) C(X,Z2)
    C = random_covariance(3, np.random.default_rng(5))
    F = PolynomialFunctional({(2,): 1.0}, 1)
    got = gaussian_ibp_expand(F, C, 1, "wick_blocks", N=2)
    assert got == pytest.approx(2 * C[0, 1] * C[0, 2])


@pytest.mark.parametrize(
    "variant,N,m,terms",
    [
        ("wick_pairs", 2, 1, {(1,): 1.0, (2,): 0.7}),
        ("wick_blocks", 2, 1, {(2,): 1.0}),
        ("wick_blocks", 3, 1, {(3,): 1.0, (1,): -0.5}),
        ("wick_blocks", 1, 2, {(2,): 1.0, (0,): 0.3}),
    ],
)
def test_expansion_matches_monte_carlo(variant, N, m, terms):
    rng = np.random.default_rng(7)
    width = 2 if variant == "wick_pairs" else N
    C = random_covariance(1 + width * m, rng)
    F = PolynomialFunctional(terms, 1)
    exact = gaussian_ibp_expand(F, C, m, variant, N=N)
    mean, se = ibp_lhs_monte_carlo(F, C, m, variant, N=N, replicas=400_000, seed=8)
    assert abs(mean - exact) <= 4 * se


def test_strict_flavor_differs_when_blocks_are_singletons():
    # with N=1 the block rule allows every pair; the strict rule drops {1,2}
    rng = np.random.default_rng(0)
    C = random_covariance(3, rng)
    F = PolynomialFunctional({(2,): 1.0}, 1)
    block = gaussian_ibp_expand(F, C, 2, "wick_blocks", N=1)
    strict = gaussian_ibp_expand(F, C, 2, "wick_blocks", N=1, flavor="strict")
    mean, se = ibp_lhs_monte_carlo(F, C, 2, "wick_blocks", N=1, replicas=400_000, seed=1)
    assert abs(mean - block) <= 4 * se
    assert abs(block - strict) > 10 * se


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 10_000))
def test_independent_blocks_collapse(N, m, seed):
    """With E[Z X] = 0 the expansion is E[F] times E[product of Wick blocks]."""
    rng = np.random.default_rng(seed)
    n = 2
    CX = random_covariance(n, rng)
    CZ = random_covariance(N * m, rng)
    C = np.zeros((n + N * m, n + N * m))
    C[:n, :n] = CX
    C[n:, n:] = CZ
    F = PolynomialFunctional.random(n, 3, rng)
    # E[prod of Wick blocks] = sum over pairings with no pair inside a block
    blocks = 0.0
    for p in enumerate_pairings(range(1, N * m + 1), PairingClass("PN", N=N)):
        blocks += np.prod([CZ[i - 1, j - 1] for i, j in p.blocks])
    got = gaussian_ibp_expand(F, C, m, "wick_blocks", N=N)
    assert got == pytest.approx(F.expectation(CX) * blocks, rel=1e-10, abs=1e-12)
    if m == 1:
        assert got == pytest.approx(0.0, abs=1e-12)


def test_covariance_shape_checked():
    F = PolynomialFunctional({(1,): 1.0}, 1)
    with pytest.raises(DimensionMismatch):
        gaussian_ibp_expand(F, np.eye(4), 1, "wick_pairs")
