"""Random elliptic coefficient fields ``a = A(h)``.

The built-in matrix map is

    A(eta) = lam0 I + R(theta(eta)) diag(g(eta), g(eta) (1 + beta)) R(theta(eta))^T

with ``g(eta) = g0 + amp (1 + tanh(eta / width)) / 2`` and
``theta(eta) = theta0 + theta_amp tanh(eta / width)``.  For ``g >= 0`` and
``beta >= -1`` both eigenvalues are at least ``lam0``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EllipticityViolation
from .grid_noise import Field2D, Grid2D, SpaceTimeField, SpaceTimeGrid

__all__ = [
    "MatrixMapSpec",
    "CoefficientField",
    "build_coefficient_field",
    "constant_field",
    "det_inverse_at",
]

FAMILIES = ("tanh-rotation",)


@dataclass(frozen=True)
class MatrixMapSpec:
    family: str = "tanh-rotation"
    lam0: float = 1.0
    g0: float = 0.0
    amp: float = 0.0
    width: float = 1.0
    beta: float = 0.0
    theta0: float = 0.0
    theta_amp: float = 0.0
    derivative_bounds: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown matrix-map family {self.family!r}")
        if not self.lam0 > 0:
            raise ValueError("lam0 must be positive")
        if not self.width > 0:
            raise ValueError("width must be positive")
        if not self.derivative_bounds:
            object.__setattr__(self, "derivative_bounds", self._derivative_bounds())
        if not all(np.isfinite(self.derivative_bounds)):
            raise ValueError("derivative bounds must be finite")

    @property
    def lam(self) -> float:
        return self.lam0

    def components(self, eta):
        """Entries ``(a11, a12, a22)`` of ``A(eta)``, vectorised over ``eta``."""
        eta = np.asarray(eta, dtype=float)
        th = np.tanh(eta / self.width)
        g = self.g0 + self.amp * 0.5 * (1.0 + th)
        theta = self.theta0 + self.theta_amp * th
        c, s = np.cos(theta), np.sin(theta)
        g2 = g * (1.0 + self.beta)
        a11 = self.lam0 + g * c * c + g2 * s * s
        a22 = self.lam0 + g * s * s + g2 * c * c
        a12 = (g - g2) * c * s
        return a11, a12, a22

    def __call__(self, eta):
        a11, a12, a22 = self.components(eta)
        return np.stack([np.stack([a11, a12], -1), np.stack([a12, a22], -1)], -2)

    def is_constant_det(self) -> bool:
        return self.amp == 0

    def _derivative_bounds(self, kmax=3):
        # sup |d^k A / d eta^k| (Frobenius) by finite differences on a fine sample
        w = self.width
        eta = np.linspace(-12 * w, 12 * w, 8001)
        d = eta[1] - eta[0]
        vals = np.stack(self.components(eta))
        out = [float(np.max(np.sqrt((vals**2).sum(axis=0) + vals[1] ** 2)))]
        for _ in range(kmax):
            vals = np.gradient(vals, d, axis=1)
            out.append(float(np.max(np.sqrt((vals**2).sum(axis=0) + vals[1] ** 2))))
        return tuple(out)

    def ellipticity_margin(self, eta=None) -> float:
        """Smallest eigenvalue of ``A`` on a fine sample minus ``lam0``."""
        if eta is None:
            eta = np.linspace(-12 * self.width, 12 * self.width, 4001)
        a11, a12, a22 = self.components(eta)
        lmax = (a11 + a22) / 2 + np.sqrt(((a11 - a22) / 2) ** 2 + a12 * a12)
        lmin = (a11 * a22 - a12 * a12) / lmax
        return float(lmin.min() - self.lam0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("derivative_bounds")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in d if k != "derivative_bounds"})


@dataclass(frozen=True)
class CoefficientField:
    """Symmetric 2x2 matrix per grid point, with cached determinant and inverse.

    ``matrices`` has shape ``grid_shape + (2, 2)``; ``grid`` is a Grid2D or a
    SpaceTimeGrid.
    """

    grid: object
    matrices: np.ndarray = field(repr=False)
    lam: float
    det: np.ndarray = field(default=None, repr=False)
    inv: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        a = np.array(self.matrices, dtype=float)
        a[..., 1, 0] = a[..., 0, 1]
        det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] ** 2
        bad = ~(np.isfinite(det) & (a[..., 0, 0] > 0) & (det >= self.lam**2 * (1 - 1e-12)))
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise EllipticityViolation(
                f"matrix at {idx} fails det >= lam^2 = {self.lam**2} or positivity (det = {det[idx]})"
            )
        inv = np.empty_like(a)
        inv[..., 0, 0] = a[..., 1, 1] / det
        inv[..., 1, 1] = a[..., 0, 0] / det
        inv[..., 0, 1] = inv[..., 1, 0] = -a[..., 0, 1] / det
        for arr in (a, det, inv):
            arr.setflags(write=False)
        object.__setattr__(self, "matrices", a)
        object.__setattr__(self, "det", det)
        object.__setattr__(self, "inv", inv)

    @property
    def shape(self):
        return self.matrices.shape[:-2]

    @property
    def is_spacetime(self) -> bool:
        return isinstance(self.grid, SpaceTimeGrid)

    @property
    def spatial_grid(self) -> Grid2D:
        return self.grid.grid if self.is_spacetime else self.grid

    def component(self, i, j) -> np.ndarray:
        """``a_ij`` with 1-based indices."""
        return self.matrices[..., i - 1, j - 1]

    def eigenvalues(self):
        a11, a12, a22 = self.matrices[..., 0, 0], self.matrices[..., 0, 1], self.matrices[..., 1, 1]
        m = (a11 + a22) / 2
        r = np.sqrt(((a11 - a22) / 2) ** 2 + a12**2)
        return m - r, m + r

    def lambda_max(self) -> float:
        return float(self.eigenvalues()[1].max())

    def lambda_min(self) -> float:
        return float(self.eigenvalues()[0].min())

    def is_constant(self) -> bool:
        flat = self.matrices.reshape(-1, 4)
        return bool(np.all(flat == flat[0]))

    def time_slice(self, k) -> "CoefficientField":
        if not self.is_spacetime:
            return self
        return CoefficientField(self.grid.grid, self.matrices[k], self.lam)


def build_coefficient_field(h, spec: MatrixMapSpec) -> CoefficientField:
    """Apply ``A`` pointwise to ``h`` (a Field2D or SpaceTimeField)."""
    if isinstance(h, Field2D):
        grid = h.grid
    elif isinstance(h, SpaceTimeField):
        grid = h.stgrid
    else:
        raise TypeError("h must be a Field2D or SpaceTimeField")
    return CoefficientField(grid, spec(h.values), spec.lam)


def constant_field(grid, matrix, lam=None) -> CoefficientField:
    """Spatially constant field ``a(x) = matrix``; ``lam`` defaults to its smallest eigenvalue."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim == 0:
        matrix = float(matrix) * np.eye(2)
    shape = grid.shape
    if lam is None:
        lam = float(np.linalg.eigvalsh(0.5 * (matrix + matrix.T)).min())
        if lam <= 0:
            raise EllipticityViolation("matrix is not positive definite")
    return CoefficientField(grid, np.broadcast_to(matrix, shape + (2, 2)), lam)


def det_inverse_at(field: CoefficientField, point):
    """Cached ``(det a(x), a(x)^-1)`` at a grid index."""
    point = tuple(point)
    return float(field.det[point]), np.array(field.inv[point])
