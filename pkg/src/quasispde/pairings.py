"""Restricted pairings and Gaussian integration-by-parts expansions.

Index sets are 1-based, as in the usual statement of Isserlis-type formulas.

Pairing classes
---------------
``P``
    all perfect pairings of ``J``.
``P2``
    pairings that never pair ``2i-1`` with ``2i``.
``PN``
    pairings in which no pair has both elements in one block
    ``{N i + 1, ..., N i + N}``.  With ``flavor="strict"`` the pairing must
    in addition belong to ``P2``.

The expansion :func:`gaussian_ibp_expand` evaluates, for a polynomial ``F`` of
a Gaussian vector ``X`` and extra Gaussians ``Z_1..Z_M``,

    sum_{J even} sum_{P in class(J)} prod_{(p,q) in P} E[Z_p Z_q]
        sum_{k: J^c -> {1..n}} E[d^{|J^c|} F / dX_k] prod_{i in J^c} E[Z_i X_k(i)],

which equals ``E[F(X) prod Z_i]`` (plain), ``E[F(X) prod (Z_{2i-1}Z_{2i} - C)]``
(wick_pairs) or ``E[F(X) prod_i (Z_{Ni+1} <> ... <> Z_{Ni+N})]`` (wick_blocks).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from functools import lru_cache
from math import prod

import numpy as np

from .errors import DimensionMismatch
from .wick_hermite import wick_product

__all__ = [
    "Pairing",
    "PairingClass",
    "PolynomialFunctional",
    "enumerate_pairings",
    "count_pairings",
    "double_factorial",
    "isserlis_moment",
    "gaussian_ibp_expand",
    "ibp_lhs_monte_carlo",
    "random_covariance",
    "pairings_to_json",
]


@dataclass(frozen=True)
class Pairing:
    """Partition of ``base`` into 2-element blocks, each stored as ``(min, max)``."""

    blocks: tuple
    base: tuple

    def __post_init__(self):
        seen = [i for b in self.blocks for i in b]
        if sorted(seen) != sorted(self.base) or len(set(seen)) != len(seen):
            raise ValueError("blocks must partition the base set")


@dataclass(frozen=True)
class PairingClass:
    kind: str = "P"
    N: int = 2
    flavor: str = "block"

    def __post_init__(self):
        if self.kind not in ("P", "P2", "PN"):
            raise ValueError(f"unknown pairing class {self.kind!r}")
        if self.flavor not in ("block", "strict"):
            raise ValueError(f"unknown PN flavor {self.flavor!r}")
        if self.N < 1:
            raise ValueError("block size N must be positive")

    def allows(self, i, j) -> bool:
        """Whether the pair ``{i, j}`` may appear (1-based indices)."""
        i, j = min(i, j), max(i, j)
        in_p2_block = (i % 2 == 1) and j == i + 1
        if self.kind == "P":
            return True
        if self.kind == "P2":
            return not in_p2_block
        same_block = (i - 1) // self.N == (j - 1) // self.N
        if same_block:
            return False
        if self.flavor == "strict" and in_p2_block:
            return False
        return True


def double_factorial(k) -> int:
    return prod(range(k, 0, -2)) if k > 0 else 1


def _pairings_of(items, allowed):
    if not items:
        yield ()
        return
    first, rest = items[0], items[1:]
    for idx, partner in enumerate(rest):
        if not allowed(first, partner):
            continue
        remaining = rest[:idx] + rest[idx + 1 :]
        for tail in _pairings_of(remaining, allowed):
            yield ((first, partner),) + tail


def enumerate_pairings(J, cls: PairingClass | None = None):
    """All pairings of ``J`` in the class, ordered lexicographically.

    Odd ``|J|`` gives an empty list; ``J = ()`` gives the single empty pairing.
    """
    cls = cls or PairingClass("P")
    items = tuple(sorted(int(j) for j in J))
    if len(set(items)) != len(items):
        raise ValueError("J must not contain repeated indices")
    if len(items) % 2:
        return []
    return [Pairing(p, items) for p in _pairings_of(items, cls.allows)]


def count_pairings(J, cls: PairingClass | None = None) -> int:
    cls = cls or PairingClass("P")
    items = tuple(sorted(int(j) for j in J))
    if len(items) % 2:
        return 0
    return sum(1 for _ in _pairings_of(items, cls.allows))


def isserlis_moment(covariance, indices):
    """``E[prod_k X_{indices[k]}]`` for a centred Gaussian vector (0-based indices).

    Repeated indices are allowed.  Odd total degree returns 0.
    """
    C = np.asarray(covariance)
    idx = tuple(sorted(int(i) for i in indices))
    if len(idx) % 2:
        return 0.0

    @lru_cache(maxsize=None)
    def moment(multiset):
        if not multiset:
            return 1.0
        first, rest = multiset[0], multiset[1:]
        total = 0.0
        for k in range(len(rest)):
            # identical partners give identical terms; skip repeats of the same value
            if k > 0 and rest[k] == rest[k - 1]:
                continue
            mult = rest.count(rest[k])
            total = total + mult * C[first, rest[k]] * moment(rest[:k] + rest[k + 1 :])
        return total

    return moment(idx)


class PolynomialFunctional:
    """Sparse polynomial ``F(X_1..X_n) = sum_alpha c_alpha X^alpha``.

    ``terms`` maps exponent tuples of length ``n`` to coefficients.
    """

    def __init__(self, terms, n):
        self.n = int(n)
        clean = {}
        for alpha, coef in dict(terms).items():
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != self.n or min(alpha, default=0) < 0:
                raise DimensionMismatch(f"exponent {alpha} does not fit {self.n} variables")
            if coef != 0:
                clean[alpha] = clean.get(alpha, 0) + coef
        self.terms = clean

    @property
    def degree(self) -> int:
        return max((sum(a) for a in self.terms), default=0)

    @classmethod
    def random(cls, n, degree, rng):
        """All monomials of total degree <= ``degree`` with N(0,1) coefficients."""
        terms = {}
        for alpha in itertools.product(range(degree + 1), repeat=n):
            if sum(alpha) <= degree:
                terms[alpha] = float(rng.standard_normal())
        return cls(terms, n)

    def derivative(self, ks):
        """Partial derivative along the 0-based variable list ``ks``."""
        out = dict(self.terms)
        for k in ks:
            nxt = {}
            for alpha, c in out.items():
                if alpha[k] == 0:
                    continue
                beta = list(alpha)
                beta[k] -= 1
                beta = tuple(beta)
                nxt[beta] = nxt.get(beta, 0) + c * alpha[k]
            out = nxt
        return PolynomialFunctional(out, self.n)

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n:
            raise DimensionMismatch("wrong number of variables")
        total = np.zeros(X.shape[:-1])
        for alpha, c in self.terms.items():
            term = np.full(X.shape[:-1], float(c))
            for k, a in enumerate(alpha):
                if a:
                    term = term * X[..., k] ** a
            total = total + term
        return total

    def expectation(self, covariance):
        """``E[F(X)]`` for centred Gaussian ``X`` with the given covariance."""
        total = 0.0
        for alpha, c in self.terms.items():
            idx = [k for k, a in enumerate(alpha) for _ in range(a)]
            total += c * isserlis_moment(covariance, idx)
        return total


def _class_for(variant, N):
    if variant == "plain":
        return PairingClass("P"), 1
    if variant == "wick_pairs":
        return PairingClass("P2"), 2
    if variant.startswith("wick_blocks"):
        return PairingClass("PN", N=N), N
    raise ValueError(f"unknown variant {variant!r}")


def _split(covariance, n, M):
    C = np.asarray(covariance, dtype=float)
    if C.shape != (n + M, n + M):
        raise DimensionMismatch(f"covariance must be {(n + M, n + M)}, got {C.shape}")
    return C[:n, :n], C[n:, n:], C[n:, :n]


def gaussian_ibp_expand(F: PolynomialFunctional, covariance, m, variant="plain", N=2, flavor="block"):
    """Exact right-hand side of the Gaussian integration-by-parts expansion.

    Parameters
    ----------
    F : PolynomialFunctional in ``n`` variables.
    covariance : ``(n+M, n+M)`` covariance of ``(X_1..X_n, Z_1..Z_M)``.
    m : number of factors (``M = m``, ``2m`` or ``N m`` depending on ``variant``).
    variant : ``"plain"``, ``"wick_pairs"`` or ``"wick_blocks"``.
    flavor : ``"block"`` or ``"strict"``, only for ``wick_blocks``.
    """
    cls, width = _class_for(variant, N)
    if variant.startswith("wick_blocks"):
        cls = PairingClass("PN", N=N, flavor=flavor)
    n = F.n
    M = width * m
    CX, CZ, CZX = _split(covariance, n, M)
    deg = F.degree
    total = 0.0
    indices = list(range(1, M + 1))
    for size in range(0, M + 1, 2):
        if M - size > deg:
            continue
        for J in itertools.combinations(indices, size):
            pair_sum = 0.0
            for P in _pairings_of(J, cls.allows):
                pair_sum += prod(CZ[p - 1, q - 1] for p, q in P)
            if pair_sum == 0.0:
                continue
            Jc = [i for i in indices if i not in J]
            deriv_sum = 0.0
            for ks in itertools.product(range(n), repeat=len(Jc)):
                weight = prod(CZX[i - 1, k] for i, k in zip(Jc, ks))
                if weight == 0.0:
                    continue
                deriv_sum += weight * F.derivative(ks).expectation(CX)
            total += pair_sum * deriv_sum
    return total


def ibp_lhs_monte_carlo(F: PolynomialFunctional, covariance, m, variant="plain", N=2, replicas=10**6, seed=0, chunk=250_000):
    """Monte-Carlo estimate of the left-hand side and its standard error."""
    _, width = _class_for(variant, N)
    n = F.n
    M = width * m
    C = np.asarray(covariance, dtype=float)
    _split(C, n, M)
    w, V = np.linalg.eigh(C)
    L = V * np.sqrt(np.clip(w, 0, None))
    rng = np.random.default_rng(seed)
    CZ = C[n:, n:]
    s1 = s2 = 0.0
    done = 0
    while done < replicas:
        b = min(chunk, replicas - done)
        S = rng.standard_normal((b, n + M)) @ L.T
        val = F(S[:, :n])
        for i in range(m):
            sl = slice(n + width * i, n + width * (i + 1))
            zi = S[:, sl]
            ci = CZ[width * i : width * (i + 1), width * i : width * (i + 1)]
            if variant == "plain":
                val = val * zi[:, 0]
            else:
                val = val * wick_product(zi, ci)
        s1 += float(val.sum())
        s2 += float((val * val).sum())
        done += b
    mean = s1 / replicas
    var = max(s2 / replicas - mean**2, 0.0) * replicas / (replicas - 1)
    return mean, float(np.sqrt(var / replicas))


def random_covariance(dim, rng, rank=None):
    """Random PSD matrix ``A A^T / k`` with ``A`` of shape ``(dim, k)``."""
    k = rank or dim
    A = rng.standard_normal((dim, k))
    return A @ A.T / k


def pairings_to_json(pairings, cls: PairingClass | None = None) -> str:
    """Stable JSON listing, used for the golden-file suite."""
    cls = cls or PairingClass("P")
    payload = {
        "class": {"kind": cls.kind, "N": cls.N, "flavor": cls.flavor},
        "count": len(pairings),
        "pairings": [[list(b) for b in p.blocks] for p in pairings],
    }
    return json.dumps(payload, sort_keys=True, indent=1)
