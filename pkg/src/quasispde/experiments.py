"""Self-convergence runs of the renormalised equations across a dyadic delta ladder.

All delta levels of one run share the same white noise and are advanced as a
single batched state, so the increments ``sup|u_delta - u_{delta/2}|`` compare
solutions driven by one noise realisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coeff_field import CoefficientField
from .errors import InstabilityDetected
from .frozen_kernels import counterterm_phi2
from .grid_noise import make_mollifier, periodic_convolve, sample_white_noise_spatial
from .pde_solver import MollifiedNoiseStream, SmoothNonlinearity, SolverConfig, pam_counterterms, run_scheme
from .wick_hermite import hermite


@dataclass(frozen=True)
class ConvergenceTable:
    """Sup-norm increments between consecutive delta levels, one row per arm."""

    equation: str
    deltas: tuple
    arms: dict
    T: float
    dt: float
    seeds: tuple
    blowup: dict = field(default_factory=dict)

    def increments(self, arm):
        return np.asarray(self.arms[arm])

    def strictly_decreasing(self, arm) -> bool:
        inc = self.increments(arm)
        return bool(np.all(np.isfinite(inc)) and np.all(np.diff(inc) < 0))

    def rows(self):
        out = []
        for arm, inc in self.arms.items():
            for d0, d1, v in zip(self.deltas, self.deltas[1:], inc):
                out.append((arm, d0, d1, float(v)))
        return out

    def to_dict(self):
        return {
            "equation": self.equation,
            "deltas": list(self.deltas),
            "T": self.T,
            "dt": self.dt,
            "seeds": list(self.seeds),
            "increments": {k: [float(x) for x in v] for k, v in self.arms.items()},
            "strictly_decreasing": {k: self.strictly_decreasing(k) for k in self.arms},
            "blowup": self.blowup,
        }


def _sup_increments(u):
    return np.array([np.abs(u[i] - u[i + 1]).max() for i in range(len(u) - 1)])


def _ladder(deltas):
    deltas = tuple(float(d) for d in deltas)
    if len(deltas) < 2 or any(d1 >= d0 for d0, d1 in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be at least two strictly decreasing values")
    return deltas


def _run(a, cfg, u0, force, drift, dealias):
    try:
        u, _ = run_scheme(a, cfg, u0, force, drift, dealias=dealias)
        return u, None
    except InstabilityDetected as exc:
        return None, str(exc)


def pam_final_states(a, deltas, seed, T=0.25, dt=1e-3, g=None, f=0.05,
                     mode="function", mollifier="bump", mesh=16, grid=None):
    """Final g-PAM states ``(D, n, n)`` for one spatial noise sample, all deltas batched.

    ``a`` is a CoefficientField or a callable taking the white noise (a
    Field2D on ``grid``) and returning one, for coefficients correlated with
    the noise.
    """
    deltas = _ladder(deltas)
    grid = a.spatial_grid if isinstance(a, CoefficientField) else grid
    if grid is None:
        raise ValueError("grid is required when a is a callable")
    g = g if g is not None else SmoothNonlinearity(offset=0.1, amp=0.1)
    fn = f if isinstance(f, SmoothNonlinearity) else SmoothNonlinearity(offset=float(f))
    w = sample_white_noise_spatial(grid, seed)
    if not isinstance(a, CoefficientField):
        a = a(w)
    xi = np.stack([periodic_convolve(w, make_mollifier(d, "spatial", grid, profile=mollifier)).values
                   for d in deltas])
    cts = [pam_counterterms(a, d, mode, mollifier, mesh) for d in deltas]
    shape = (len(deltas),) + grid.shape
    c_xi = np.stack([np.broadcast_to(c.xi2, grid.shape) for c in cts])
    c_b = np.stack([np.broadcast_to(c.b2.reshape(c.b2.shape + (1, 1) * (c.b2.ndim == 2)), (2, 2) + grid.shape)
                    for c in cts], axis=2)
    f_on = not fn.is_zero

    def drift(u, uh, k, ops):
        gu = g(u)
        out = gu * (xi - c_xi * g.deriv(u))
        if f_on:
            du = ops.grad(uh)
            fu = fn(u)
            g2 = gu * gu
            for i in range(2):
                out = out + fu * (du[i] * du[i] - c_b[i, i] * g2)
        return out

    cfg = SolverConfig.from_T(T, dt)
    return _run(a, cfg, np.zeros(shape), None, drift, True), cfg


def pam_self_convergence(a, deltas, seeds=(0,), T=0.25, dt=1e-3, g=None, f=0.05,
                         modes=("function",), mollifier="bump", mesh=16, grid=None) -> ConvergenceTable:
    """Seed-averaged increments of g-PAM for each counterterm mode."""
    deltas = _ladder(deltas)
    arms, blow = {}, {}
    for mode in modes:
        incs = []
        for s in seeds:
            (u, err), cfg = pam_final_states(a, deltas, s, T, dt, g, f, mode, mollifier, mesh, grid)
            if u is None:
                blow[f"{mode}/{s}"] = err
                incs.append(np.full(len(deltas) - 1, np.inf))
            else:
                incs.append(_sup_increments(u))
        arms[mode] = np.mean(incs, axis=0)
    return ConvergenceTable("pam", deltas, arms, cfg.T, cfg.dt, tuple(seeds), blow)


def phi_final_states(a: CoefficientField, deltas, seed, K=3, T=0.5, dt_factor=2.0, mollifier="bump",
                     mesh=16, ablation=True, c2_mode="function"):
    """Final phi states with counterterms, without them, and the linear (K = 1) reference.

    Returns a dict of ``(D, n, n)`` arrays keyed ``renormalised``, ``raw`` and
    ``linear`` (the latter two only when ``ablation``), plus the solver config.
    ``c2_mode`` is ``function``, ``constant`` (spatial mean) or ``none``.
    """
    deltas = _ladder(deltas)
    K = int(K)
    if K < 1:
        raise ValueError("K must be at least 1")
    grid = a.spatial_grid
    D = len(deltas)
    # round the step count up so that dt never exceeds delta_min^2 / dt_factor
    nt = int(np.ceil(T * dt_factor / deltas[-1] ** 2 - 1e-9))
    cfg = SolverConfig(dt=T / nt, nt=nt)
    if c2_mode not in ("function", "constant", "none"):
        raise ValueError(f"unknown counterterm mode {c2_mode!r}")
    if c2_mode == "none":
        c2 = np.zeros((D,) + grid.shape)
    else:
        c2 = np.stack([np.broadcast_to(counterterm_phi2(a, d, mollifier, mesh).values, grid.shape) for d in deltas])
        if c2_mode == "constant":
            c2 = np.broadcast_to(c2.mean(axis=(1, 2), keepdims=True), c2.shape)
    stream = MollifiedNoiseStream(grid, cfg.dt, seed,
                                  [make_mollifier(d, "space-time", grid, profile=mollifier, dt=cfg.dt) for d in deltas])
    arms = ("renormalised", "raw", "linear") if ablation else ("renormalised",)
    C = np.concatenate([c2, np.zeros_like(c2), np.zeros_like(c2)][: len(arms)])
    reps = len(arms)

    def drift(u, uh, k, ops):
        out = -hermite(K, u, C)
        if ablation:
            # the linear reference: H_1(u, c) = u, massive heat flow
            out[2 * D:] = -u[2 * D:]
        return out

    def force(k):
        x = stream(k)
        return np.concatenate([x] * reps) if reps > 1 else x

    u, err = _run(a, cfg, np.zeros((reps * D,) + grid.shape), force, drift, K >= 2)
    if u is None:
        return {"error": err}, cfg
    return {name: u[i * D:(i + 1) * D] for i, name in enumerate(arms)}, cfg


def phi_self_convergence(a: CoefficientField, deltas, seeds=(0,), K=3, T=0.5, dt_factor=2.0,
                         mollifier="bump", mesh=16, ablation=True, c2_mode="function") -> ConvergenceTable:
    """Seed-averaged increments for the phi equation.

    Arms: ``renormalised`` and, with ``ablation``, ``raw`` (no counterterm) and
    ``centred`` / ``raw_centred`` (difference to the linear reference).
    """
    deltas = _ladder(deltas)
    names = ("renormalised", "raw", "centred", "raw_centred") if ablation else ("renormalised",)
    acc = {k: [] for k in names}
    blow = {}
    for s in seeds:
        states, cfg = phi_final_states(a, deltas, s, K, T, dt_factor, mollifier, mesh, ablation, c2_mode)
        if "error" in states:
            blow[str(s)] = states["error"]
            for k in names:
                acc[k].append(np.full(len(deltas) - 1, np.inf))
            continue
        acc["renormalised"].append(_sup_increments(states["renormalised"]))
        if ablation:
            lin = states["linear"]
            acc["raw"].append(_sup_increments(states["raw"]))
            acc["centred"].append(_sup_increments(states["renormalised"] - lin))
            acc["raw_centred"].append(_sup_increments(states["raw"] - lin))
    arms = {k: np.mean(v, axis=0) for k, v in acc.items()}
    return ConvergenceTable(f"phi{K + 1}", deltas, arms, cfg.T, cfg.dt, tuple(seeds), blow)
