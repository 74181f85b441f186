"""Semi-implicit spectral time stepping on the periodic torus.

One step of the split scheme for ``du/dt = a : D^2 u + f`` is

    u_{k+1} = (1 - dt lam Lap)^{-1} [u_k + dt ((a - lam I) : D^2 u_k + f_k)]

with all derivatives spectral.  The constant part ``lam Lap`` is implicit and
diagonal in Fourier space; the variable remainder and the drift are explicit.
With ``lam >= max eigenvalue of a`` the scheme is stable for the stiff part.

Every solver runs through :func:`run_scheme`, which works on plain arrays and
accepts a leading batch axis, so several noise levels or replicas can be
advanced together.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .coeff_field import CoefficientField
from .errors import GridMismatch, InstabilityDetected
from .grid_noise import Field2D, Grid2D, MollifierKernel, SpaceTimeField, SpaceTimeGrid, noise_slice
from .wick_hermite import hermite

__all__ = [
    "SolverConfig",
    "SolutionTrajectory",
    "SpectralOps",
    "SmoothNonlinearity",
    "PamCounterterms",
    "MollifiedNoiseStream",
    "heat_step",
    "run_scheme",
    "solve_linear_she",
    "solve_pam_renormalized",
    "stochastic_convolution",
    "solve_phi_renormalized",
    "pam_counterterms",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"QSPDTRJ1"
# noise slices for time index k live at stream index k + NOISE_OFFSET, so that the
# taps k - M .. k + M never go negative and every delta sees the same white noise
NOISE_OFFSET = 1 << 12


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    nt: int
    lam_split: float | None = None
    dealias: bool | None = None
    scheme: str = "semi-implicit-split"
    save_every: int = 0
    growth_limit: float = 1e6

    def __post_init__(self):
        if self.scheme != "semi-implicit-split":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.nt) < 1:
            raise ValueError("nt must be at least 1")
        object.__setattr__(self, "nt", int(self.nt))
        if self.lam_split is not None and not self.lam_split > 0:
            raise ValueError("lam_split must be positive")

    @property
    def T(self) -> float:
        return self.dt * self.nt

    @classmethod
    def from_T(cls, T, dt, **kw):
        nt = max(1, int(round(T / dt)))
        return cls(dt=T / nt, nt=nt, **kw)

    def resolved(self, a: CoefficientField) -> "SolverConfig":
        """Fill in ``lam_split`` from ``a`` or check the given one against it."""
        lmax = a.lambda_max()
        if self.lam_split is None:
            return replace(self, lam_split=lmax)
        if self.lam_split < lmax * (1 - 1e-12):
            raise ValueError(f"lam_split={self.lam_split} below max eigenvalue {lmax} of a")
        return self


class SpectralOps:
    """FFT derivatives on an ``n x n`` periodic grid (real FFT layout).

    First derivatives drop the Nyquist mode, which has no real odd counterpart.
    """

    def __init__(self, grid: Grid2D):
        self.grid = grid
        n = grid.n
        kx = grid.wavenumbers()[:, None]
        ky = (2 * np.pi * np.fft.rfftfreq(n, d=1.0 / n))[None, :]
        self.kx2, self.ky2 = kx**2 + 0 * ky, ky**2 + 0 * kx
        self.kx = np.where(np.abs(kx) == np.pi * n, 0.0, kx) + 0 * ky
        self.ky = np.where(np.abs(ky) == np.pi * n, 0.0, ky) + 0 * kx
        self.kxky = self.kx * self.ky
        self.k2 = self.kx2 + self.ky2
        mx = np.abs(np.fft.fftfreq(n, d=1.0 / n))[:, None]
        my = np.fft.rfftfreq(n, d=1.0 / n)[None, :]
        self.mask23 = ((mx <= n / 3) & (my <= n / 3)).astype(float)

    def fft(self, u):
        return np.fft.rfft2(u)

    def ifft(self, uh):
        return np.fft.irfft2(uh, s=self.grid.shape)

    def grad(self, uh):
        return self.ifft(1j * self.kx * uh), self.ifft(1j * self.ky * uh)

    def hessian(self, uh):
        return self.ifft(-self.kx2 * uh), self.ifft(-self.kxky * uh), self.ifft(-self.ky2 * uh)

    def laplacian(self, uh):
        return self.ifft(-self.k2 * uh)

    def dealias(self, f):
        return self.ifft(self.fft(f) * self.mask23)


@dataclass(frozen=True)
class SmoothNonlinearity:
    """``offset + amp * tanh(u / scale)``; constants are ``amp = 0``."""

    offset: float = 0.0
    amp: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def __call__(self, u):
        if self.amp == 0:
            return np.full_like(u, self.offset)
        return self.offset + self.amp * np.tanh(u / self.scale)

    def deriv(self, u):
        if self.amp == 0:
            return np.zeros_like(u)
        return self.amp / self.scale / np.cosh(u / self.scale) ** 2

    @property
    def is_constant(self) -> bool:
        return self.amp == 0

    @property
    def is_zero(self) -> bool:
        return self.amp == 0 and self.offset == 0


@dataclass(frozen=True)
class PamCounterterms:
    """Counterterms of the renormalised g-PAM drift.

    ``xi2`` broadcasts against the grid; ``b2`` has shape ``(2, 2) + grid``
    or ``(2, 2)``.
    """

    xi2: np.ndarray
    b2: np.ndarray
    mode: str = "function"
    delta: float | None = None

    def __post_init__(self):
        if self.mode not in ("function", "constant", "none"):
            raise ValueError(f"unknown counterterm mode {self.mode!r}")
        object.__setattr__(self, "xi2", np.asarray(self.xi2, dtype=float))
        b2 = np.asarray(self.b2, dtype=float)
        if b2.shape[:2] != (2, 2):
            raise ValueError("b2 needs leading shape (2, 2)")
        object.__setattr__(self, "b2", b2)

    @classmethod
    def none(cls):
        return cls(0.0, np.zeros((2, 2)), mode="none")


def pam_counterterms(a: CoefficientField, delta, mode="function", mollifier="bump", mesh=16, method="auto"):
    """``c^{Xi2}`` and ``c^{b2}_ij`` for ``a`` at scale ``delta``.

    ``constant`` mode replaces each field by its spatial mean.
    """
    from .frozen_kernels import counterterm_pam_b2, counterterm_pam_xi2

    if mode == "none":
        return PamCounterterms.none()
    xi2 = counterterm_pam_xi2(a, delta, mollifier, mesh, method=method).values
    b2 = np.empty((2, 2) + xi2.shape)
    for i, j in ((1, 1), (1, 2), (2, 2)):
        b2[i - 1, j - 1] = counterterm_pam_b2(a, i, j, delta, mollifier, mesh, method=method).values
    b2[1, 0] = b2[0, 1]
    if mode == "constant":
        xi2 = np.full_like(xi2, xi2.mean())
        b2 = np.broadcast_to(b2.mean(axis=(-2, -1))[..., None, None], b2.shape).copy()
    elif mode != "function":
        raise ValueError(f"unknown counterterm mode {mode!r}")
    return PamCounterterms(xi2, b2, mode=mode, delta=delta)


class MollifiedNoiseStream:
    """Space-time mollified white noise ``xi * rho^delta`` produced one time slice at a time.

    Several kernels (one per delta) share the same white noise, and
    ``__call__(k)`` returns an array with a leading axis over kernels (dropped
    for a single kernel).  The white noise at time index ``j`` is
    ``noise_slice(grid, dt, seed, j + NOISE_OFFSET)``.
    """

    def __init__(self, grid: Grid2D, dt, seed, kernels):
        single = isinstance(kernels, MollifierKernel)
        kernels = [kernels] if single else list(kernels)
        for k in kernels:
            if k.kind != "space-time" or k.grid != grid or not np.isclose(k.dt, dt):
                raise GridMismatch("kernels must be space-time kernels on the stream grid and time step")
            if k.half_width >= NOISE_OFFSET:
                raise ValueError("mollifier time support too long for the stream")
        self.grid, self.dt, self.seed, self.single = grid, float(dt), seed, single
        self.M = max(k.half_width for k in kernels)
        cell = grid.spacing**2 * dt
        # per kernel: rho_hat[m + M_b] for time offsets m = -M_b..M_b
        self._rho_hat = [
            np.stack([np.fft.rfft2(k.time_slice(m)) * cell for m in k.taps]) for k in kernels
        ]
        # doubled ring buffer: the noise hats for j = k-M .. k+M form one contiguous slice
        self._L = 2 * self.M + 1
        self._buf = np.empty((2 * self._L, grid.n, grid.n // 2 + 1), dtype=complex)
        self._hi = None  # largest stored noise index

    def _store(self, j):
        w = np.fft.rfft2(noise_slice(self.grid, self.dt, self.seed, j + NOISE_OFFSET))
        self._buf[j % self._L] = w
        self._buf[j % self._L + self._L] = w

    def hat(self, k):
        lo, hi = k - self.M, k + self.M
        if self._hi is None or lo <= self._hi - self._L or hi < self._hi:
            start = lo
        else:
            start = self._hi + 1
        for j in range(start, hi + 1):
            self._store(j)
        self._hi = hi
        s = lo % self._L
        window = self._buf[s : s + self._L]
        out = np.empty((len(self._rho_hat), self.grid.n, self.grid.n // 2 + 1), dtype=complex)
        for b, taps in enumerate(self._rho_hat):
            Mb = (taps.shape[0] - 1) // 2
            # tap m pairs with noise index k - m, so the taps run backwards along the window
            out[b] = np.einsum("mij,mij->ij", taps[::-1], window[self.M - Mb : self.M + Mb + 1])
        return out

    def __call__(self, k):
        out = np.fft.irfft2(self.hat(k), s=self.grid.shape)
        return out[0] if self.single else out

    def white_noise(self, k):
        return noise_slice(self.grid, self.dt, self.seed, k + NOISE_OFFSET)


@dataclass(frozen=True)
class SolutionTrajectory:
    """Saved snapshots ``(time, Field2D)`` of one run.

    ``blowup_time`` is set when the stepper was truncated; the last snapshot
    is then the last finite state.
    """

    times: tuple
    fields: tuple
    delta: float | None = None
    seed: int | None = None
    equation: str = "she"
    counterterm_mode: str = "none"
    blowup_time: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if len(times) != len(self.fields):
            raise ValueError("times and fields differ in length")
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "fields", tuple(self.fields))

    @property
    def final(self) -> Field2D:
        return self.fields[-1]

    @property
    def blew_up(self) -> bool:
        return self.blowup_time is not None

    def at(self, t) -> Field2D:
        i = int(np.argmin(np.abs(np.array(self.times) - t)))
        if not np.isclose(self.times[i], t, rtol=0, atol=1e-12 + 1e-9 * abs(t)):
            raise KeyError(f"no snapshot at t={t}")
        return self.fields[i]

    def header(self) -> dict:
        return {
            "n": self.fields[0].grid.n,
            "count": len(self.times),
            "delta": self.delta,
            "seed": self.seed,
            "equation": self.equation,
            "counterterm_mode": self.counterterm_mode,
            "blowup_time": self.blowup_time,
            "meta": self.meta,
        }

    def to_csv(self, directory, stamp=None):
        """One CSV per snapshot: ``i,j,x,y,u`` rows after ``#`` header lines."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for k, (t, f) in enumerate(zip(self.times, self.fields)):
            buf = io.StringIO()
            for key, val in {**(stamp or {}), "time": repr(t), "equation": self.equation}.items():
                buf.write(f"# {key}: {val}\n")
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["i", "j", "x", "y", "u"])
            n, h = f.grid.n, f.grid.spacing
            for i in range(n):
                for j in range(n):
                    w.writerow([i, j, repr(i * h), repr(j * h), repr(float(f.values[i, j]))])
            p = directory / f"slice_{k:05d}.csv"
            p.write_text(buf.getvalue())
            paths.append(p)
        return paths

    def save_checkpoint(self, path):
        """Binary checkpoint; the layout is described in docs/checkpoint_format.md."""
        head = json.dumps(self.header(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            for t, f in zip(self.times, self.fields):
                fh.write(struct.pack("<d", t))
                fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def load_checkpoint(path) -> SolutionTrajectory:
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise ValueError("not a trajectory checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        head = json.loads(fh.read(hlen))
        grid = Grid2D(head["n"])
        times, fields = [], []
        for _ in range(head["count"]):
            (t,) = struct.unpack("<d", fh.read(8))
            vals = np.frombuffer(fh.read(8 * grid.n * grid.n), dtype="<f8").reshape(grid.shape)
            times.append(t)
            fields.append(Field2D(grid, vals))
    return SolutionTrajectory(
        times, fields, head["delta"], head["seed"], head["equation"], head["counterterm_mode"],
        head["blowup_time"], head["meta"],
    )


def _coef_arrays(a: CoefficientField, cfg: SolverConfig):
    """Callable ``k -> (a11, a12, a22)`` at the start of step ``k``."""
    m = a.matrices
    if not a.is_spacetime:
        comps = (m[..., 0, 0], m[..., 0, 1], m[..., 1, 1])
        return lambda k: comps
    stg = a.grid

    def at(k):
        # slice covering the start of step k, times measured from the grid origin
        idx = min(int(np.floor(k * cfg.dt / stg.dt + 1e-9)), stg.nt - 1)
        return m[idx, ..., 0, 0], m[idx, ..., 0, 1], m[idx, ..., 1, 1]

    return at


def _advance(ops, coef, u, uh, f, dt, lam, limit):
    a11, a12, a22 = coef
    d11, d12, d22 = ops.hessian(uh)
    rhs = u + dt * ((a11 - lam) * d11 + 2 * a12 * d12 + (a22 - lam) * d22 + f)
    new_h = ops.fft(rhs) / (1 + dt * lam * ops.k2)
    new = ops.ifft(new_h)
    top = np.max(np.abs(new))
    if not np.isfinite(top) or top > limit * max(np.max(np.abs(u)), 1.0):
        raise InstabilityDetected(f"sup norm jumped to {top:.3e} in one step")
    return new, new_h


def heat_step(a: CoefficientField, u: Field2D, f, cfg: SolverConfig) -> Field2D:
    """One split step for ``du/dt = a : D^2 u + f`` (``f`` a Field2D, array or scalar)."""
    if a.spatial_grid != u.grid:
        raise GridMismatch("coefficient field and u live on different grids")
    cfg = cfg.resolved(a)
    ops = SpectralOps(u.grid)
    fv = f.values if isinstance(f, Field2D) else np.broadcast_to(np.asarray(f, float), u.grid.shape)
    coef = _coef_arrays(a, cfg)(0)
    new, _ = _advance(ops, coef, u.values, ops.fft(u.values), fv, cfg.dt, cfg.lam_split, cfg.growth_limit)
    return Field2D(u.grid, new)


def _forcing(xi, grid, nt):
    """Callable ``k -> forcing array`` for the supported noise inputs."""
    if xi is None:
        return lambda k: 0.0
    if isinstance(xi, Field2D):
        if xi.grid != grid:
            raise GridMismatch("noise grid differs from the coefficient grid")
        v = xi.values
        return lambda k: v
    if isinstance(xi, SpaceTimeField):
        if xi.stgrid.grid != grid:
            raise GridMismatch("noise grid differs from the coefficient grid")
        if xi.stgrid.nt < nt:
            raise GridMismatch("space-time noise shorter than the requested run")
        v = xi.values
        return lambda k: v[k]
    if isinstance(xi, MollifiedNoiseStream):
        if xi.grid != grid:
            raise GridMismatch("noise grid differs from the coefficient grid")
        return xi
    if callable(xi):
        return xi
    arr = np.asarray(xi, dtype=float)
    if arr.shape[-2:] != grid.shape:
        raise GridMismatch("forcing array does not match the grid")
    return lambda k: arr


def run_scheme(a: CoefficientField, cfg: SolverConfig, u0=None, forcing=None, drift=None,
               dealias=False, save_steps=(), on_step=None):
    """Advance ``du/dt = a : D^2 u + drift(u) + forcing`` for ``cfg.nt`` steps.

    Arrays may carry leading batch axes.  ``drift(u, uh, k, ops)`` is explicit;
    ``forcing`` is anything accepted by the solvers (Field2D, SpaceTimeField,
    MollifiedNoiseStream, array).  Returns ``(u_final, saved)`` where
    ``saved`` maps step index to a copy of ``u`` for the requested steps, and
    ``on_step(k, u)`` is called after every step with the new state.
    """
    grid = a.spatial_grid
    cfg = cfg.resolved(a)
    ops = SpectralOps(grid)
    coef = _coef_arrays(a, cfg)
    force = _forcing(forcing, grid, cfg.nt)
    u = np.zeros(grid.shape) if u0 is None else np.array(u0.values if isinstance(u0, Field2D) else u0, float)
    uh = ops.fft(u)
    save_steps = set(save_steps)
    saved = {0: u.copy()} if 0 in save_steps else {}
    for k in range(cfg.nt):
        f = force(k)
        if drift is not None:
            d = drift(u, uh, k, ops)
            if dealias:
                d = ops.dealias(d)
            f = d + f
        u, uh = _advance(ops, coef(k), u, uh, f, cfg.dt, cfg.lam_split, cfg.growth_limit)
        if k + 1 in save_steps:
            saved[k + 1] = u.copy()
        if on_step is not None:
            on_step(k + 1, u)
    return u, saved


def _save_steps(cfg):
    if cfg.save_every and cfg.save_every > 0:
        return sorted(set(range(0, cfg.nt + 1, cfg.save_every)) | {0, cfg.nt})
    return [0, cfg.nt]


def _trajectory(grid, cfg, a, u0, forcing, drift, dealias, **meta):
    steps = _save_steps(cfg)
    snaps = {}
    blowup = None

    def keep(k, u):
        if k in steps:
            snaps[k] = u.copy()

    u_init = np.zeros(grid.shape) if u0 is None else np.asarray(u0.values if isinstance(u0, Field2D) else u0, float)
    snaps[0] = u_init.copy()
    state = {"k": 0, "u": u_init}

    def track(k, u):
        state["k"], state["u"] = k, u
        keep(k, u)

    try:
        run_scheme(a, cfg, u_init, forcing, drift, dealias, on_step=track)
    except InstabilityDetected:
        blowup = (state["k"] + 1) * cfg.dt
        snaps[state["k"]] = state["u"].copy()
    ks = sorted(snaps)
    return SolutionTrajectory(
        [k * cfg.dt for k in ks], [Field2D(grid, snaps[k]) for k in ks], blowup_time=blowup, **meta
    )


def _default_cfg(cfg, T, dt=1e-3):
    return cfg if cfg is not None else SolverConfig.from_T(T, dt)


def solve_linear_she(a: CoefficientField, xi_delta, T=1.0, cfg=None, mass=0.0, u0=None, delta=None, seed=None):
    """``du/dt - a : D^2 u + mass u = xi_delta``, ``u(0) = u0`` (default 0).

    Spatial noise (a Field2D) acts as a time-constant forcing.
    """
    cfg = _default_cfg(cfg, T)
    drift = None
    if mass:
        drift = lambda u, uh, k, ops: -mass * u  # noqa: E731
    return _trajectory(
        a.spatial_grid, cfg, a, u0, xi_delta, drift, False,
        delta=delta, seed=seed, equation="she", counterterm_mode="none", meta={"mass": float(mass)},
    )


def _normalise_f(f):
    if f is None:
        return []
    if isinstance(f, SmoothNonlinearity):
        # a single function means f_ij = f delta_ij
        return [] if f.is_zero else [((0, 0), f), ((1, 1), f)]
    out = []
    for (i, j), fn in dict(f).items():
        if not fn.is_zero:
            out.append(((i - 1, j - 1), fn))
    return out


def pam_drift(counterterms: PamCounterterms, f, g: SmoothNonlinearity, xi):
    """Renormalised g-PAM right-hand side as a ``drift(u, uh, k, ops)`` callable.

    ``sum_ij f_ij(u) (d_i u d_j u - c^{b2}_ij g(u)^2) + g(u) (xi - c^{Xi2} g'(u))``
    """
    fs = _normalise_f(f)
    c_xi, c_b = counterterms.xi2, counterterms.b2

    def drift(u, uh, k, ops):
        gu = g(u)
        xik = xi(k)
        out = gu * (xik - c_xi * g.deriv(u)) if not g.is_zero else np.zeros_like(u)
        if fs:
            g2 = gu * gu
            du = ops.grad(uh)
            for (i, j), fn in fs:
                out = out + fn(u) * (du[i] * du[j] - c_b[i, j] * g2)
        return out

    return drift


def solve_pam_renormalized(a: CoefficientField, xi_delta, counterterms: PamCounterterms, f=None,
                           g: SmoothNonlinearity = SmoothNonlinearity(offset=1.0), u0=None, T=1.0, cfg=None,
                           delta=None, seed=None, raise_on_blowup=False):
    """Renormalised g-PAM with explicit nonlinearity.

    ``f`` is ``None``, a :class:`SmoothNonlinearity` (taken as ``f_ij = f delta_ij``)
    or a dict ``{(i, j): SmoothNonlinearity}`` with 1-based indices.  A blow-up
    truncates the trajectory and sets ``blowup_time``.
    """
    grid = a.spatial_grid
    cfg = _default_cfg(cfg, T)
    xi = _forcing(xi_delta, grid, cfg.nt)
    drift = pam_drift(counterterms, f, g, xi)
    nonlinear = bool(_normalise_f(f)) or not g.is_constant
    dealias = nonlinear if cfg.dealias is None else cfg.dealias and nonlinear
    traj = _trajectory(
        grid, cfg, a, u0, None, drift, dealias,
        delta=delta, seed=seed, equation="pam", counterterm_mode=counterterms.mode,
    )
    if raise_on_blowup and traj.blew_up:
        raise InstabilityDetected(f"g-PAM run blew up at t={traj.blowup_time}")
    return traj


def stochastic_convolution(a: CoefficientField, xi_delta, cfg=None):
    """``<1>_delta``: zero-initial-data solve driven by ``xi_delta``.

    For a SpaceTimeField input the output lives on the same space-time grid:
    slice ``k`` is the solution at ``t0 + k dt`` (slice 0 is zero).  For a
    :class:`MollifiedNoiseStream` ``cfg`` sets the number of steps.
    """
    if isinstance(xi_delta, SpaceTimeField):
        stg = xi_delta.stgrid
        cfg = cfg or SolverConfig(dt=stg.dt, nt=stg.nt - 1)
        if not np.isclose(cfg.dt, stg.dt):
            raise GridMismatch("solver dt must equal the noise time step")
        _, saved = run_scheme(a, cfg, None, xi_delta, save_steps=range(stg.nt))
        vals = np.stack([saved[k] for k in range(cfg.nt + 1)])
        if vals.shape[0] < stg.nt:
            vals = np.concatenate([vals, np.zeros((stg.nt - vals.shape[0],) + stg.grid.shape)])
        return SpaceTimeField(stg, vals)
    if cfg is None:
        raise ValueError("cfg is required for streamed noise")
    _, saved = run_scheme(a, cfg, None, xi_delta, save_steps=range(cfg.nt + 1))
    stg = SpaceTimeGrid(a.spatial_grid, 0.0, (cfg.nt + 1) * cfg.dt, cfg.nt + 1)
    return SpaceTimeField(stg, np.stack([saved[k] for k in range(cfg.nt + 1)]))


def phi_drift(c2, K):
    c2 = 0.0 if c2 is None else (c2.values if hasattr(c2, "values") else np.asarray(c2, dtype=float))
    return lambda u, uh, k, ops: -hermite(K, u, c2)


def solve_phi_renormalized(a: CoefficientField, xi_delta, c2, K, u0=None, T=1.0, cfg=None,
                           delta=None, seed=None, raise_on_blowup=False):
    """``du/dt - a : D^2 u = -H_K(u, c2) + xi_delta``.

    ``c2`` is the counterterm (scalar, array, CountertermField) or ``None`` for
    the raw power ``u^K``.
    """
    K = int(K)
    if K < 1:
        raise ValueError("K must be at least 1")
    grid = a.spatial_grid
    cfg = _default_cfg(cfg, T)
    dealias = (K >= 2) if cfg.dealias is None else (cfg.dealias and K >= 2)
    traj = _trajectory(
        grid, cfg, a, u0, xi_delta, phi_drift(c2, K), dealias,
        delta=delta, seed=seed, equation=f"phi{K + 1}",
        counterterm_mode="none" if c2 is None else ("constant" if np.ndim(getattr(c2, "values", c2)) == 0 else "function"),
        meta={"K": K},
    )
    if raise_on_blowup and traj.blew_up:
        raise InstabilityDetected(f"phi run blew up at t={traj.blowup_time}")
    return traj
