"""``quasispde`` command-line entry point.

Every file written carries the config hash, the seed and the package version
and contains nothing time- or host-dependent, so a rerun is byte-identical.
Exit codes: 0 on success (including negative scientific outcomes such as a
detected blow-up or a failed diagram check), 2 on configuration or input
errors, 1 on a failed selftest.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import warnings
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .coeff_field import build_coefficient_field, constant_field
from .config import ExperimentConfig, load_config
from .errors import ConfigError, QuasiSPDEError
from .grid_noise import Grid2D, correlated_drift, make_bump_kernel, replica_seed, sample_white_noise_spatial

# seed streams for the CLI-level draws; the model_estimator streams are 0..2
_COEF_STREAM = 0
_SIM_STREAM = 3
_PHI_COEF_STREAM = 2

DRAWN_ITEM4_FAILURES = ("dumbbell_q2_4", "dumbbell_q5_2")


# -- emission ------------------------------------------------------------------


def _stamp(cfg: ExperimentConfig | None, extra=None) -> dict:
    s = {"version": __version__}
    if cfg is not None:
        s["config_hash"] = cfg.digest()
        s["seed"] = cfg.seed
    if extra:
        s.update(extra)
    return s


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Fraction):
        return str(obj)
    return obj


def write_json(path, payload, stamp):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"stamp": stamp, **_plain(payload)}
    path.write_text(json.dumps(body, sort_keys=True, indent=1) + "\n")
    return path


def write_csv(path, header, rows, stamp):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    for k in sorted(stamp):
        buf.write(f"# {k}={stamp[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(buf.getvalue())
    return path


def _field_rows(values):
    n1, n2 = values.shape
    ii, jj = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
    return zip(ii.ravel().tolist(), jj.ravel().tolist(), values.ravel().tolist())


# -- coefficient fields ----------------------------------------------------------


def coefficient_for(cfg: ExperimentConfig, xi=None):
    """``a = A(sigma * xi + mu)``; constant ``A(mu)`` when sigma vanishes or ``xi`` is None."""
    g = Grid2D(cfg.n)
    correlated = cfg.sigma_width > 0 and cfg.sigma_amp != 0
    if not correlated or xi is None:
        return constant_field(g, cfg.spec(np.asarray(cfg.mu, float)), cfg.spec.lam)
    sigma = make_bump_kernel(cfg.sigma_width, g, amplitude=cfg.sigma_amp)
    return build_coefficient_field(correlated_drift(xi, sigma, cfg.mu), cfg.spec)


def _fixed_coefficient(cfg, stream):
    g = Grid2D(cfg.n)
    xi = sample_white_noise_spatial(g, replica_seed(cfg.seed, stream, 0))
    return coefficient_for(cfg, xi)


# -- counterterms ------------------------------------------------------------


def cmd_counterterms(cfg: ExperimentConfig) -> dict:
    from .frozen_kernels import (
        counterterm_pam_b2,
        counterterm_pam_xi2,
        counterterm_phi2,
        fit_log_slope,
        phi2_fourier,
    )

    cfg.require("scales.deltas")
    out = Path(cfg.out) / "counterterms"
    stamp = _stamp(cfg)
    a = _fixed_coefficient(cfg, _COEF_STREAM)
    m = np.asarray(a.matrices)
    is_const = bool(np.all(m == m.reshape(-1, 2, 2)[0]))
    m0 = m.reshape(-1, 2, 2)[0]
    det0 = float(np.linalg.det(m0))
    inv0 = np.linalg.inv(m0)
    series = {}
    for kind in cfg.kinds:
        targets = [(None, kind)] if kind != "pam_b2" else [((i, j), f"pam_b2_{i}{j}") for i, j in ((1, 1), (1, 2), (2, 2))]
        for ij, label in targets:
            means = []
            for k, d in enumerate(cfg.deltas):
                if kind == "pam_xi2":
                    c = counterterm_pam_xi2(a, d, cfg.mollifier, cfg.mesh)
                elif kind == "phi2":
                    c = counterterm_phi2(a, d, cfg.mollifier, cfg.mesh)
                else:
                    c = counterterm_pam_b2(a, ij[0], ij[1], d, cfg.mollifier, cfg.mesh)
                vals = np.broadcast_to(c.values, a.spatial_grid.shape)
                write_csv(out / f"{label}_d{k}.csv", ["i", "j", "value"], _field_rows(vals),
                          {**stamp, "kind": label, "delta": repr(float(d))})
                means.append(float(vals.mean()))
            entry = {"deltas": list(cfg.deltas), "mean": means}
            if len(cfg.deltas) >= 2:
                entry["log_slope"], entry["log_intercept"] = fit_log_slope(cfg.deltas, means)
            if is_const:
                ref = _reference_slope(kind, ij, det0, inv0, m0, cfg, phi2_fourier, fit_log_slope)
                if ref is not None:
                    entry["reference_slope"] = ref
                    if "log_slope" in entry:
                        entry["slope_rel_err"] = abs(entry["log_slope"] / ref - 1) if ref else abs(entry["log_slope"])
            series[label] = entry
    summary = {"constant_coefficient": is_const, "matrix": m0.tolist() if is_const else None, "series": series}
    write_json(out / "summary.json", summary, stamp)
    return summary


def _reference_slope(kind, ij, det, inv, m0, cfg, phi2_fourier, fit_log_slope):
    if kind == "pam_xi2":
        return 1.0 / (2 * math.pi * math.sqrt(det))
    if kind == "pam_b2":
        return float(inv[ij[0] - 1, ij[1] - 1]) / (4 * math.pi * math.sqrt(det))
    # the Fourier oracle handles a = c I only
    if abs(m0[0, 1]) > 0 or m0[0, 0] != m0[1, 1] or len(cfg.deltas) < 2:
        return None
    vals = [phi2_fourier(float(m0[0, 0]), d, cfg.mollifier) for d in cfg.deltas]
    return fit_log_slope(cfg.deltas, vals)[0]


# -- simulate --------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig) -> dict:
    from .experiments import pam_final_states, phi_final_states, _sup_increments
    from .pde_solver import SmoothNonlinearity

    cfg.require("scales.deltas")
    cfg.require_resolvable()
    if len(cfg.deltas) < 2:
        raise ConfigError("self-convergence needs at least two deltas", key="scales.deltas",
                          lineno=cfg.lines.get("scales.deltas"))
    out = Path(cfg.out) / "simulate"
    stamp = _stamp(cfg)
    seeds = [replica_seed(cfg.seed, _SIM_STREAM, p) for p in range(cfg.paths)]
    g = Grid2D(cfg.n)
    incs, blowups, first = {}, {}, None
    if cfg.equation == "pam":
        gfun = SmoothNonlinearity(offset=cfg.g_offset, amp=cfg.g_amp, scale=cfg.g_scale)
        modes = (cfg.counterterm,) + (("none",) if cfg.ablation and cfg.counterterm != "none" else ())
        a = lambda xi: coefficient_for(cfg, xi)  # noqa: E731
        for mode in modes:
            for p, s in enumerate(seeds):
                (u, err), scfg = pam_final_states(a, cfg.deltas, s, cfg.T, cfg.dt, gfun, cfg.f, mode,
                                                  cfg.mollifier, cfg.mesh, grid=g)
                _collect(incs, blowups, mode, p, u, err, _sup_increments, len(cfg.deltas))
                if first is None and u is not None:
                    first = {"solution": u}
        dt = scfg.dt
    else:
        a = _fixed_coefficient(cfg, _PHI_COEF_STREAM)
        need_lin = cfg.ablation or cfg.K == 1
        D = len(cfg.deltas)
        for p, s in enumerate(seeds):
            states, scfg = phi_final_states(a, cfg.deltas, s, cfg.K, cfg.T, cfg.dt_factor, cfg.mollifier,
                                            cfg.mesh, ablation=need_lin, c2_mode=cfg.counterterm)
            err = states.get("error")
            main = states.get("renormalised")
            _collect(incs, blowups, cfg.counterterm, p, main, err, _sup_increments, D)
            if cfg.ablation and cfg.counterterm != "none":
                raw, lin = states.get("raw"), states.get("linear")
                _collect(incs, blowups, "none", p, raw, err, _sup_increments, D)
                _collect(incs, blowups, "centred", p, None if err else main - lin, err, _sup_increments, D)
                _collect(incs, blowups, "none_centred", p, None if err else raw - lin, err, _sup_increments, D)
            if first is None and err is None:
                first = {"solution": main}
                if need_lin:
                    first["linear"] = states["linear"]
        dt = scfg.dt
    arms = {k: np.mean(v, axis=0) for k, v in incs.items()}
    rows = []
    for arm, inc in arms.items():
        for d0, d1, v in zip(cfg.deltas, cfg.deltas[1:], inc):
            rows.append((arm, float(d0), float(d1), float(v)))
    write_csv(out / "convergence.csv", ["arm", "delta", "delta_half", "sup_increment"], rows, stamp)
    if first is not None:
        for k, d in enumerate(cfg.deltas):
            write_csv(out / f"final_d{k}.csv", ["i", "j", "u"], _field_rows(first["solution"][k]),
                      {**stamp, "delta": repr(float(d)), "path": 0})
            if "linear" in first:
                write_csv(out / f"linear_reference_d{k}.csv", ["i", "j", "u"], _field_rows(first["linear"][k]),
                          {**stamp, "delta": repr(float(d)), "path": 0})
    summary = {
        "equation": cfg.equation if cfg.equation == "pam" else f"phi{cfg.K + 1}",
        "deltas": list(cfg.deltas),
        "T": cfg.T,
        "dt": dt,
        "paths": cfg.paths,
        "increments": {k: v.tolist() for k, v in arms.items()},
        "strictly_decreasing": {k: bool(np.all(np.isfinite(v)) and np.all(np.diff(v) < 0)) for k, v in arms.items()},
        "blowup": blowups,
    }
    if first is not None and "linear" in first:
        summary["linear_reference_max_diff"] = [float(np.abs(first["solution"][k] - first["linear"][k]).max())
                                                for k in range(len(cfg.deltas))]
    write_json(out / "summary.json", summary, stamp)
    return summary


def _collect(incs, blowups, arm, p, u, err, sup_increments, D):
    if err is not None or u is None:
        blowups[f"{arm}/path{p}"] = err or "no state"
        incs.setdefault(arm, []).append(np.full(D - 1, np.inf))
    else:
        incs.setdefault(arm, []).append(sup_increments(u))


# -- blowup and moments ----------------------------------------------------------


def cmd_blowup(cfg: ExperimentConfig) -> dict:
    from .model_estimator import blowup_experiment

    cfg.require("scales.deltas")
    cfg.require_resolvable(blowup=True)
    setup = cfg.probe_setup()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        # a constant-determinant map runs as the control arm instead of being refused
        rep = blowup_experiment(setup, control=True)
    rep = dict(rep)
    rep["warnings"] = sorted({str(w.message) for w in caught})
    out = Path(cfg.out) / "blowup"
    stamp = _stamp(cfg)
    rows = []
    for p, scale in enumerate(rep["blowup_scales"]):
        for k, d in enumerate(rep["deltas"]):
            rows.append((scale, d, rep["V_const"][k][p], rep["V_const_se"][k][p], rep["V_func"][k][p], rep["V_func_se"][k][p]))
    write_csv(out / "variance.csv", ["scale", "delta", "V_const", "V_const_se", "V_func", "V_func_se"], rows, stamp)
    write_json(out / "report.json", rep, stamp)
    return rep


def cmd_moments(cfg: ExperimentConfig) -> dict:
    from .model_estimator import (
        estimate_gradient_product_moments,
        estimate_xi_ixi_moments,
        phi_hermite_moment_study,
        run_pam_probes,
    )

    cfg.require("scales.deltas", "moments.objects")
    cfg.require_resolvable(lambdas=True)
    setup = cfg.probe_setup()
    want = []
    if "xi_ixi" in cfg.objects:
        want.append("xi")
    if any(o.startswith("grad") for o in cfg.objects):
        want.append("grad")
    out = Path(cfg.out) / "moments"
    stamp = _stamp(cfg)
    summary = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        samples = run_pam_probes(setup, tuple(want)) if want else None
        for obj in cfg.objects:
            studies = []
            if obj == "hermite_2":
                ren, raw = phi_hermite_moment_study(setup, N=2)
                studies = [s for s in (ren, raw) if s.mode in cfg.modes]
            else:
                for mode in cfg.modes:
                    if obj == "xi_ixi":
                        studies.append(estimate_xi_ixi_moments(setup, mode, samples))
                    else:
                        i, j = int(obj[-2]), int(obj[-1])
                        studies.append(estimate_gradient_product_moments(setup, i, j, mode, samples))
            for s in studies:
                name = f"{obj}_{s.mode}"
                rows = [(r["tag"], r["mode"], r["delta"], r["lambda"], r["moment"], r["se"]) for r in s.rows()]
                write_csv(out / f"{name}.csv", ["tag", "mode", "delta", "lambda", "moment", "se"], rows, stamp)
                summary[name] = s.summary()
    summary = {"studies": summary, "warnings": sorted({str(w.message) for w in caught})}
    write_json(out / "summary.json", summary, stamp)
    return summary


# -- combinatorial commands ----------------------------------------------------------


def _designated(path: Path):
    for line in path.read_text().splitlines():
        s = line.strip().lstrip("#").strip()
        if s.startswith("designated check:"):
            return s.split(":", 1)[1].strip()
    return None


def _kappas(values):
    from .hq_graphs import Kappas

    vals = [Fraction(v) for v in values] if values else [Fraction(1, 100)]
    if len(vals) == 1:
        return Kappas.uniform(vals[0])
    if len(vals) != 3:
        raise ConfigError("--kappa takes one value or three (k kp kpp)", key="--kappa")
    return Kappas(*vals)


def cmd_check_graph(path, kappa=None, assumption="designated", out=None, method="vectorized"):
    from .hq_graphs import check_assumption_full, check_assumption_weak, load_diagram

    path = Path(path)
    try:
        g = load_diagram(path)
    except OSError as exc:
        raise ConfigError(f"cannot read diagram: {exc}", key="PATH") from None
    if assumption == "designated":
        assumption = _designated(path) or "full"
    if assumption not in ("full", "weak"):
        raise ConfigError(f"unknown assumption {assumption!r}", key="--assumption")
    kap = _kappas(kappa)
    check = check_assumption_full if assumption == "full" else check_assumption_weak
    rep = check(g, kap, method=method)
    if out is not None:
        stamp = _stamp(None, {"diagram": path.name, "assumption": assumption})
        dest = Path(out) / "check_graph" / f"{path.stem}.json"
        dest.parent.mkdir(parents=True, exist_ok=True)
        body = json.loads(rep.to_json())
        write_json(dest, body, stamp)
    return rep


def cmd_pairings(size, cls="P", N=2, flavor="block", listing=False):
    from .pairings import PairingClass, count_pairings, enumerate_pairings, pairings_to_json

    if size < 0:
        raise ConfigError("size must be nonnegative", key="--size")
    pc = PairingClass(cls, N, flavor)
    J = tuple(range(1, size + 1))
    if listing:
        ps = list(enumerate_pairings(J, pc))
        return len(ps), pairings_to_json(ps, pc)
    return count_pairings(J, pc), None


def cmd_selftest() -> list:
    """Fast consistency checks across the modules; returns ``(name, ok, detail)`` rows."""
    from .frozen_kernels import fit_log_slope, xi2_value
    from .hq_graphs import FIXTURES, Kappas, check_assumption_full, check_assumption_weak, replay_witness
    from .pairings import PairingClass, count_pairings, double_factorial
    from .wick_hermite import hermite, hermite_binomial_check

    rows = []
    x = np.array([0.0, 1.0, 2.0, -1.5])
    h3 = hermite(3, x, 1.0)
    rows.append(("hermite H3", bool(np.allclose(h3, x**3 - 3 * x)), ""))
    rng = np.random.default_rng(0)
    X, Y = rng.standard_normal(50), rng.standard_normal(50)
    err = max(float(np.max(np.abs(np.subtract(*hermite_binomial_check(N, X, Y, 0.7, 0.3))))) for N in range(7))
    rows.append(("hermite binomial identity", err < 1e-10, f"max err {err:.1e}"))
    counts = [count_pairings(tuple(range(1, m + 1)), PairingClass("P")) for m in range(0, 11)]
    ok = all(c == (double_factorial(m - 1) if m % 2 == 0 else 0) for m, c in enumerate(counts))
    rows.append(("pairing counts (|J|-1)!!", ok, ""))
    ds = [2.0**-k for k in range(3, 7)]
    slope = fit_log_slope(ds, [xi2_value(np.eye(2), d) for d in ds])[0]
    rel = abs(slope * 2 * math.pi - 1)
    rows.append(("xi2 log slope 1/(2 pi)", rel < 0.03, f"rel err {rel:.3f}"))
    fails = []
    for name, (g, which) in FIXTURES.items():
        check = check_assumption_full if which == "full" else check_assumption_weak
        if not check(g, Kappas()).passed:
            fails.append(name)
    # the drawn dumbbells with a top-top fictitious edge fail item 4 at 1/100;
    # the selftest checks that this stays the only exception and is replayable
    unexpected = sorted(set(fails) - set(DRAWN_ITEM4_FAILURES))
    replayable = all(
        replay_witness(FIXTURES[n][0], check_assumption_full(FIXTURES[n][0], Kappas()).item(4).witness, Kappas())
        for n in DRAWN_ITEM4_FAILURES if n in fails
    )
    rows.append(("fixture diagrams", not unexpected and replayable,
                 f"drawn item-4 failures: {', '.join(f for f in fails if f in DRAWN_ITEM4_FAILURES) or 'none'}"
                 + (f"; unexpected: {', '.join(unexpected)}" if unexpected else "")))
    return rows


# -- argument parsing ----------------------------------------------------------------


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS)
    p.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS)
    p.add_argument("--seed", metavar="U64", type=int, default=argparse.SUPPRESS)
    p.add_argument("--serial", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--replicas", metavar="N", type=int, default=argparse.SUPPRESS)
    return p


def build_parser():
    common = _common()
    ap = argparse.ArgumentParser(prog="quasispde", description="Quasilinear singular SPDE experiments.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--config", metavar="PATH")
    ap.add_argument("--out", metavar="DIR")
    ap.add_argument("--seed", metavar="U64", type=int)
    ap.add_argument("--serial", action="store_true")
    ap.add_argument("--replicas", metavar="N", type=int)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, hlp in (
        ("counterterms", "counterterm fields per (kind, delta) and fitted log-slopes"),
        ("simulate", "self-convergence of the renormalised equation across the delta list"),
        ("blowup", "variance blow-up with constant versus function counterterms"),
        ("moments", "moment and scaling-exponent estimates of model objects"),
    ):
        sub.add_parser(name, parents=[common], help=hlp)
    cg = sub.add_parser("check-graph", parents=[common], help="check a labelled diagram file")
    cg.add_argument("path", metavar="PATH")
    cg.add_argument("--kappa", nargs="+", default=None, help="one value for all three, or k kp kpp")
    cg.add_argument("--assumption", choices=("designated", "full", "weak"), default="designated")
    cg.add_argument("--json", action="store_true", help="print the JSON report instead of the table")
    pr = sub.add_parser("pairings", parents=[common], help="count or list pairings of {1..size}")
    pr.add_argument("--size", type=int, required=True)
    pr.add_argument("--cls", choices=("P", "P2", "PN"), default="P")
    pr.add_argument("--N", type=int, default=2)
    pr.add_argument("--flavor", choices=("block", "strict"), default="block")
    pr.add_argument("--list", action="store_true", dest="listing")
    sub.add_parser("selftest", parents=[common], help="quick internal consistency checks")
    return ap


def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("this command needs --config PATH", key="--config")
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, replicas=args.replicas, out=args.out, serial=args.serial)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (QuasiSPDEError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    cmd = args.command
    if cmd in ("counterterms", "simulate", "blowup", "moments"):
        cfg = _load(args)
        fn = {"counterterms": cmd_counterterms, "simulate": cmd_simulate,
              "blowup": cmd_blowup, "moments": cmd_moments}[cmd]
        fn(cfg)
        print(f"{cmd}: wrote {Path(cfg.out)} (config {cfg.digest()[:12]}, seed {cfg.seed})")
        return 0
    if cmd == "check-graph":
        rep = cmd_check_graph(args.path, args.kappa, args.assumption, args.out)
        print(rep.to_json() if args.json else rep.table())
        return 0
    if cmd == "pairings":
        count, listing = cmd_pairings(args.size, args.cls, args.N, args.flavor, args.listing)
        print(listing if listing is not None else count)
        return 0
    rows = cmd_selftest()
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
    return 0 if all(ok for _, ok, _ in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
