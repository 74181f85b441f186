"""Generalized Hermite polynomials and Wick products of Gaussian vectors.

``H_N(X, C)`` obeys ``H_N = X H_{N-1} - (N-1) C H_{N-2}`` with ``H_0 = 1`` and
``H_1 = X``.  For a centred Gaussian ``g`` with variance ``C``, ``H_N(g, C)`` is
the N-th Wick power of ``g``.

All routines accept Python scalars, :class:`fractions.Fraction` (exact mode) or
numpy arrays (vectorised mode).
"""
from __future__ import annotations

from math import comb

import numpy as np

from .errors import DimensionMismatch

__all__ = [
    "hermite",
    "hermite_coefficients",
    "hermite_binomial_check",
    "wick_product",
    "wick_hermite_identity_check",
    "smeared_gaussian_setup",
    "wick_orthogonality_mc",
]


def hermite(N, X, C):
    """Evaluate ``H_N(X, C)`` by the three-term recursion.

    Works elementwise on arrays and exactly on ``Fraction``/``int`` inputs.
    """
    N = int(N)
    if N < 0:
        raise ValueError("Hermite order must be nonnegative")
    if N == 0:
        # keep the shape and type of X
        return X * 0 + 1
    prev, cur = X * 0 + 1, X
    for k in range(2, N + 1):
        prev, cur = cur, X * cur - (k - 1) * C * prev
    return cur


def hermite_coefficients(N):
    """Coefficients of ``H_N`` as ``{(power_of_X, power_of_C): int}``.

    Closed-form expansion ``sum_k (-1)^k N! / (k! (N-2k)! 2^k) C^k X^(N-2k)``,
    kept independent of the recursion so it can serve as a check.
    """
    from math import factorial

    out = {}
    for k in range(N // 2 + 1):
        coef = (-1) ** k * factorial(N) // (factorial(k) * factorial(N - 2 * k) * 2**k)
        out[(N - 2 * k, k)] = coef
    return out


def hermite_binomial_check(N, X, Y, c, d):
    """Both sides of ``H_N(X+Y, c+d) = sum_n binom(N, n) H_{N-n}(X, c) H_n(Y, d)``."""
    lhs = hermite(N, X + Y, c + d)
    rhs = 0
    for n in range(N + 1):
        rhs = rhs + comb(N, n) * hermite(N - n, X, c) * hermite(n, Y, d)
    return lhs, rhs


def wick_product(values, covariance):
    """Wick product of the entries of a jointly Gaussian vector.

    Parameters
    ----------
    values : array_like, shape (..., N)
        Realised values ``Z_1..Z_N``.  Leading axes are batch axes.
    covariance : array_like, shape (..., N, N)
        ``E[Z_i Z_j]``, broadcastable against the batch axes of ``values``.

    Uses the recursion on the last index,
    ``W(S) = Z_l W(S - l) - sum_{j in S - l} C_lj W(S - {l, j})``,
    memoised over index subsets (bitmasks), so the cost is ``O(2^N N)``.
    """
    z = np.asarray(values)
    cov = np.asarray(covariance)
    if z.ndim == 0:
        raise DimensionMismatch("values must have at least one axis")
    N = z.shape[-1]
    if cov.shape[-2:] != (N, N):
        raise DimensionMismatch(
            f"covariance trailing shape {cov.shape[-2:]} does not match {N} values"
        )
    if N == 0:
        return np.ones(z.shape[:-1]) if z.ndim > 1 else 1.0

    memo = {0: 1.0}

    def w(mask):
        if mask in memo:
            return memo[mask]
        last = mask.bit_length() - 1
        rest = mask & ~(1 << last)
        val = z[..., last] * w(rest)
        j = 0
        r = rest
        while r:
            if r & 1:
                val = val - cov[..., last, j] * w(rest & ~(1 << j))
            r >>= 1
            j += 1
        memo[mask] = val
        return val

    out = w((1 << N) - 1)
    if np.ndim(out) == 0:
        return float(out)
    return out


def wick_hermite_identity_check(N, kernel, values, covariance):
    """Both sides of the Wick-power identity for a kernel-smeared Gaussian field.

    With ``X = sum_y K(y) Z(y)`` and ``c = K^T C K``, returns
    ``(H_N(X, c), sum_{y_1..y_N} prod K(y_i) W(Z(y_1),...,Z(y_N)))``.
    The right side is computed by brute force over all index tuples.
    """
    K = np.asarray(kernel, dtype=float).ravel()
    Z = np.asarray(values, dtype=float).ravel()
    C = np.asarray(covariance, dtype=float)
    M = K.size
    if Z.size != M or C.shape != (M, M):
        raise DimensionMismatch("kernel, values and covariance sizes disagree")
    lhs = hermite(N, float(K @ Z), float(K @ C @ K))
    if N == 0:
        return lhs, 1.0
    idx = np.indices((M,) * N).reshape(N, -1).T
    weights = np.prod(K[idx], axis=1)
    vals = Z[idx]
    covs = C[idx[:, :, None], idx[:, None, :]]
    rhs = float(np.sum(weights * wick_product(vals, covs)))
    return lhs, rhs


def smeared_gaussian_setup(n=8, delta=0.25, t=0.02, seed=0):
    """Small pathwise test bed: mollified noise on an ``n x n`` torus slice.

    Returns ``(kernel, values, covariance)`` where ``values`` is one sample of
    the mollified noise, ``covariance`` its exact covariance and ``kernel`` the
    discrete periodic heat kernel at time ``t`` centred at the origin,
    normalised to unit sum.
    """
    from .grid_noise import Grid2D, make_mollifier, sample_white_noise_spatial

    grid = Grid2D(n)
    h = grid.spacing
    rho = make_mollifier(delta, "spatial", grid)
    # circulant matrix of the mollifier: (rho * xi)(x) = sum_y rho(x - y) xi(y) h^2
    ix = np.arange(n)
    dx = (ix[:, None] - ix[None, :]) % n
    R = rho.values[dx[:, None, :, None], dx[None, :, None, :]].reshape(n * n, n * n) * h**2
    xi = sample_white_noise_spatial(grid, seed).values.ravel()
    values = R @ xi
    covariance = R @ R.T / h**2
    x = grid.coords()
    d2 = np.minimum(x, 1 - x) ** 2
    heat = np.exp(-(d2[:, None] + d2[None, :]) / (4 * t)) / (4 * np.pi * t)
    kernel = (heat / heat.sum()).ravel()
    return kernel, values, covariance


def wick_orthogonality_mc(N, M, replicas=100_000, seed=0):
    """Monte-Carlo estimate of ``E[H_N(g,1) H_M(g,1)]`` and its standard error."""
    g = np.random.default_rng(seed).standard_normal(int(replicas))
    prod = hermite(N, g, 1.0) * hermite(M, g, 1.0)
    return float(prod.mean()), float(prod.std(ddof=1) / np.sqrt(prod.size))
