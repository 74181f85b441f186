"""Periodic grids, discrete white noise, mollifiers and FFT convolution.

The unit torus is discretised by ``n x n`` cells of side ``h = 1/n``.  Discrete
white noise has i.i.d. ``N(0, 1/h^2)`` cell values (``N(0, 1/(dt h^2))`` in
space-time), so that pairings with a smooth test function have the continuum
variance ``||phi||_2^2``.

Kernels (mollifiers, the coloring kernel sigma) are stored as periodic arrays
on the same grid with the origin at index 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate

from .errors import GridMismatch, UnresolvableScale

__all__ = [
    "Grid2D",
    "SpaceTimeGrid",
    "Field2D",
    "SpaceTimeField",
    "MollifierKernel",
    "replica_seed",
    "sample_white_noise_spatial",
    "sample_white_noise_spacetime",
    "noise_slice",
    "make_mollifier",
    "make_bump_kernel",
    "periodic_convolve",
    "correlated_drift",
    "bump_profile",
    "profile_normalization",
]

PROFILES = ("bump", "cosine")


@dataclass(frozen=True)
class Grid2D:
    """Uniform periodic grid on the unit torus."""

    n: int
    extent: float = 1.0

    def __post_init__(self):
        n = int(self.n)
        if n < 8 or n & (n - 1):
            raise ValueError(f"n must be a power of two >= 8, got {self.n}")
        if self.extent != 1.0:
            raise ValueError("only the unit torus is supported")
        object.__setattr__(self, "n", n)

    @property
    def spacing(self) -> float:
        return self.extent / self.n

    @property
    def shape(self):
        return (self.n, self.n)

    def coords(self) -> np.ndarray:
        """1-d node coordinates ``k h``, k = 0..n-1."""
        return np.arange(self.n) * self.spacing

    def periodic_offsets(self) -> np.ndarray:
        """Signed minimal-image offsets in ``[-1/2, 1/2)`` along one axis."""
        k = np.arange(self.n)
        k = np.where(k < self.n // 2, k, k - self.n)
        return k * self.spacing

    def wavenumbers(self) -> np.ndarray:
        """Angular wavenumbers ``2 pi m`` in FFT order."""
        return 2 * np.pi * np.fft.fftfreq(self.n, d=1.0 / self.n)


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Space-time grid ``[t0, t1) x T^2`` with ``nt`` uniform time slices."""

    grid: Grid2D
    t0: float
    t1: float
    nt: int

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise ValueError("need t0 < t1")
        if int(self.nt) < 2:
            raise ValueError("need at least two time slices")
        object.__setattr__(self, "nt", int(self.nt))

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.nt

    @property
    def shape(self):
        return (self.nt, self.grid.n, self.grid.n)

    @property
    def parabolic_ratio(self) -> float:
        """``dt / h^2``; the config records how far from 1 this is."""
        return self.dt / self.grid.spacing**2

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.nt) * self.dt


def _frozen(values):
    arr = np.array(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("field values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Field2D:
    grid: Grid2D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _frozen(self.values)
        if arr.shape != self.grid.shape:
            raise GridMismatch(f"values shape {arr.shape} != grid shape {self.grid.shape}")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class SpaceTimeField:
    stgrid: SpaceTimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _frozen(self.values)
        if arr.shape != self.stgrid.shape:
            raise GridMismatch(f"values shape {arr.shape} != grid shape {self.stgrid.shape}")
        object.__setattr__(self, "values", arr)

    def slice(self, k) -> Field2D:
        return Field2D(self.stgrid.grid, self.values[k])


@dataclass(frozen=True)
class MollifierKernel:
    """Discretised ``rho^delta`` with unit discrete integral.

    Spatial kernels store an ``(n, n)`` periodic array with the origin at index 0.
    Space-time kernels store only the slices that carry mass: ``values`` has shape
    ``(2M+1, n, n)`` for time offsets ``-M..M``.
    """

    delta: float
    kind: str
    profile: str
    values: np.ndarray = field(repr=False)
    grid: Grid2D
    dt: float | None = None

    @property
    def cell_volume(self) -> float:
        v = self.grid.spacing**2
        return v * self.dt if self.kind == "space-time" else v

    @property
    def half_width(self) -> int:
        """``M``: number of time slices on each side of the origin."""
        return (self.values.shape[0] - 1) // 2 if self.kind == "space-time" else 0

    @property
    def taps(self):
        return list(range(-self.half_width, self.half_width + 1))

    def time_slice(self, m) -> np.ndarray:
        """Spatial kernel at time offset ``m`` (zero outside the support)."""
        if self.kind != "space-time":
            return self.values if m == 0 else np.zeros_like(self.values)
        M = self.half_width
        if abs(m) > M:
            return np.zeros(self.grid.shape)
        return self.values[m + M]

    def periodic_array(self, nt) -> np.ndarray:
        """Embed a space-time kernel into a periodic ``(nt, n, n)`` array."""
        M = self.half_width
        if 2 * M + 1 > nt:
            raise GridMismatch("time grid shorter than the mollifier support")
        out = np.zeros((nt,) + self.grid.shape)
        for m in range(-M, M + 1):
            out[m % nt] = self.values[m + M]
        return out


def replica_seed(master_seed, *path) -> int:
    """Deterministic child seed from a master seed and an integer path."""
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, *[int(p) for p in path]])
    return int(ss.generate_state(1, np.uint64)[0])


def sample_white_noise_spatial(grid: Grid2D, seed) -> Field2D:
    rng = np.random.default_rng(seed)
    return Field2D(grid, rng.standard_normal(grid.shape) / grid.spacing)


def noise_slice(grid: Grid2D, dt: float, seed, k: int) -> np.ndarray:
    """Time slice ``k`` of space-time white noise; slices use independent streams.

    Streaming solvers call this directly so that they reproduce
    :func:`sample_white_noise_spacetime` slice by slice without storing it.
    """
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(k)])
    return rng.standard_normal(grid.shape) / (grid.spacing * np.sqrt(dt))


def sample_white_noise_spacetime(stgrid: SpaceTimeGrid, seed) -> SpaceTimeField:
    vals = np.stack([noise_slice(stgrid.grid, stgrid.dt, seed, k) for k in range(stgrid.nt)])
    return SpaceTimeField(stgrid, vals)


def bump_profile(r, profile="bump"):
    """Unnormalised radial profile supported in ``r < 1``."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < 1
    if profile == "bump":
        out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    elif profile == "cosine":
        out[inside] = (0.5 * (1 + np.cos(np.pi * r[inside]))) ** 2
    else:
        raise ValueError(f"unknown mollifier profile {profile!r}")
    return out


@lru_cache(maxsize=None)
def profile_normalization(profile="bump", dim=2) -> float:
    """Constant ``C`` making ``C * bump_profile(|x|)`` a probability density on R^dim."""
    sphere = {1: 2.0, 2: 2 * np.pi, 3: 4 * np.pi}[dim]
    val, _ = integrate.quad(
        lambda r: bump_profile(np.array([r]), profile)[0] * r ** (dim - 1), 0, 1, epsabs=1e-14, epsrel=1e-13
    )
    return 1.0 / (sphere * val)


def make_bump_kernel(width, grid: Grid2D, profile="bump", amplitude=1.0) -> Field2D:
    """Smooth radial kernel of support radius ``width`` scaled to unit integral times ``amplitude``.

    Used for the coloring kernel sigma and for smooth test fields.
    """
    x = grid.periodic_offsets()
    r = np.sqrt(x[:, None] ** 2 + x[None, :] ** 2) / width
    vals = bump_profile(r, profile)
    vals = amplitude * vals / (vals.sum() * grid.spacing**2)
    return Field2D(grid, vals)


def make_mollifier(delta, kind="spatial", grid: Grid2D | None = None, profile="bump", dt=None):
    """Discretised mollifier ``rho^delta`` on ``grid``.

    Spatial: ``delta^-2 rho(x/delta)``.  Space-time: ``delta^-4 rho(s/delta^2, x/delta)``
    with ``rho`` radial in the three variables; needs the time step ``dt``
    (taken from ``grid`` when a :class:`SpaceTimeGrid` is passed).
    """
    if grid is None:
        raise ValueError("grid is required")
    if isinstance(grid, SpaceTimeGrid):
        dt, grid = grid.dt, grid.grid
    delta = float(delta)
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    if delta < 2 * grid.spacing:
        raise UnresolvableScale(f"delta={delta} < 2*spacing={2 * grid.spacing}")
    x = grid.periodic_offsets()
    r2 = (x[:, None] ** 2 + x[None, :] ** 2) / delta**2
    if kind == "spatial":
        vals = bump_profile(np.sqrt(r2), profile)
        vals = vals / (vals.sum() * grid.spacing**2)
        return MollifierKernel(delta, kind, profile, _frozen(vals), grid)
    if kind != "space-time":
        raise ValueError(f"unknown mollifier kind {kind!r}")
    if dt is None:
        raise ValueError("space-time mollifier needs dt")
    if delta**2 < 2 * dt:
        raise UnresolvableScale(f"delta^2={delta**2} < 2*dt={2 * dt}")
    M = int(np.floor(delta**2 / dt))
    m = np.arange(-M, M + 1)
    s2 = (m * dt / delta**2) ** 2
    vals = bump_profile(np.sqrt(s2[:, None, None] + r2[None]), profile)
    vals = vals / (vals.sum() * grid.spacing**2 * dt)
    return MollifierKernel(delta, kind, profile, _frozen(vals), grid, dt=float(dt))


def _kernel_array(k, target_shape):
    if isinstance(k, MollifierKernel):
        arr = k.periodic_array(target_shape[0]) if k.kind == "space-time" else k.values
    elif isinstance(k, (Field2D, SpaceTimeField)):
        arr = k.values
    else:
        arr = np.asarray(k, dtype=float)
    if arr.shape != target_shape:
        raise GridMismatch(f"kernel shape {arr.shape} != field shape {target_shape}")
    return arr


def periodic_convolve(f, k):
    """Circular convolution ``(f * k)(x) = sum_y f(y) k(x - y) dV`` via FFT."""
    if isinstance(f, Field2D):
        if isinstance(k, MollifierKernel) and (k.grid != f.grid or k.kind != "spatial"):
            raise GridMismatch("kernel grid does not match field grid")
        arr = _kernel_array(k, f.grid.shape)
        dv = f.grid.spacing**2
        out = np.fft.irfft2(np.fft.rfft2(f.values) * np.fft.rfft2(arr), s=f.grid.shape) * dv
        return Field2D(f.grid, out)
    if isinstance(f, SpaceTimeField):
        g = f.stgrid
        if isinstance(k, MollifierKernel) and (
            k.grid != g.grid or k.kind != "space-time" or not np.isclose(k.dt, g.dt)
        ):
            raise GridMismatch("kernel grid does not match field grid")
        arr = _kernel_array(k, g.shape)
        dv = g.grid.spacing**2 * g.dt
        out = np.fft.irfftn(np.fft.rfftn(f.values) * np.fft.rfftn(arr), s=g.shape, axes=(0, 1, 2)) * dv
        return SpaceTimeField(g, out)
    raise TypeError("f must be a Field2D or SpaceTimeField")


def correlated_drift(xi, sigma, mu):
    """``h = sigma * xi + mu``, sharing the realisation of ``xi``."""
    conv = periodic_convolve(xi, sigma)
    mu_vals = mu.values if hasattr(mu, "values") else np.broadcast_to(np.asarray(mu, float), conv.values.shape)
    if mu_vals.shape != conv.values.shape:
        raise GridMismatch("mu does not match the noise grid")
    if isinstance(conv, Field2D):
        return Field2D(conv.grid, conv.values + mu_vals)
    return SpaceTimeField(conv.stgrid, conv.values + mu_vals)
