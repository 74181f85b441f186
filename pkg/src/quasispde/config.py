"""INI experiment configuration.

Sections and keys (all optional unless a command needs them)::

    [run]          equation, seed, replicas, n_jobs, out
    [grid]         n, T, dt, dt_factor
    [scales]       deltas, lambdas, center
    [coefficient]  family, lam0, g0, amp, width, beta, theta0, theta_amp,
                   sigma_width, sigma_amp, mu
    [model]        K, counterterm, mollifier, mesh, g_offset, g_amp, g_scale,
                   f, paths, ablation, mean_zero_noise, t_probe
    [counterterms] kinds
    [blowup]       scales, recentre
    [moments]      objects, modes, q, pilot_replicas, n_boot

Only the output directory may come from the environment (``QUASISPDE_OUT``).
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .coeff_field import MatrixMapSpec
from .errors import ConfigError
from .frozen_kernels import KINDS

OUT_ENV = "QUASISPDE_OUT"
EQUATIONS = ("pam", "phi")
CT_MODES = ("function", "constant", "none")
OBJECTS = ("xi_ixi", "grad_11", "grad_12", "grad_22", "hermite_2")
MOMENT_MODES = ("function", "constant-best", "none")

_SCHEMA = {
    "run": {"equation": str, "seed": int, "replicas": int, "n_jobs": int, "out": str},
    "grid": {"n": int, "T": float, "dt": float, "dt_factor": float},
    "scales": {"deltas": "floats", "lambdas": "floats", "center": "floats"},
    "coefficient": {
        "family": str, "lam0": float, "g0": float, "amp": float, "width": float, "beta": float,
        "theta0": float, "theta_amp": float, "sigma_width": float, "sigma_amp": float, "mu": float,
    },
    "model": {
        "K": int, "counterterm": str, "mollifier": str, "mesh": int, "g_offset": float, "g_amp": float,
        "g_scale": float, "f": float, "paths": int, "ablation": bool, "mean_zero_noise": bool, "t_probe": float,
    },
    "counterterms": {"kinds": "words"},
    "blowup": {"scales": "floats", "recentre": bool},
    "moments": {"objects": "words", "modes": "words", "q": int, "pilot_replicas": int, "n_boot": int},
}

_SPEC_KEYS = ("family", "lam0", "g0", "amp", "width", "beta", "theta0", "theta_amp")


@dataclass(frozen=True)
class ExperimentConfig:
    equation: str = "pam"
    seed: int = 0
    replicas: int = 400
    n_jobs: int = 1
    out: str = "results"
    n: int = 128
    T: float = 0.25
    dt: float = 1e-3
    dt_factor: float = 2.0
    deltas: tuple = ()
    lambdas: tuple = (2.0**-2, 2.0**-3, 2.0**-4, 2.0**-5)
    center: tuple = (0.5, 0.5)
    spec: MatrixMapSpec = field(default_factory=MatrixMapSpec)
    sigma_width: float = 0.0
    sigma_amp: float = 1.0
    mu: float = 0.0
    K: int = 3
    counterterm: str = "function"
    mollifier: str = "bump"
    mesh: int = 16
    g_offset: float = 0.1
    g_amp: float = 0.1
    g_scale: float = 1.0
    f: float = 0.05
    paths: int = 1
    ablation: bool = True
    mean_zero_noise: bool = True
    t_probe: float = 0.25
    kinds: tuple = KINDS
    blowup_scales: tuple = (0.25,)
    blowup_recentre: bool = True
    objects: tuple = ("xi_ixi",)
    modes: tuple = ("function", "none")
    q: int = 2
    pilot_replicas: int = 200
    n_boot: int = 1000
    source: str | None = field(default=None, compare=False)
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self._check()

    def _err(self, key, msg):
        raise ConfigError(msg, key=key, lineno=self.lines.get(key))

    def _check(self):
        if self.equation not in EQUATIONS:
            self._err("run.equation", f"must be one of {EQUATIONS}, got {self.equation!r}")
        if self.counterterm not in CT_MODES:
            self._err("model.counterterm", f"must be one of {CT_MODES}")
        if self.seed < 0 or self.seed >= 2**64:
            self._err("run.seed", "seed must be an unsigned 64-bit integer")
        if self.replicas < 1:
            self._err("run.replicas", "replicas must be positive")
        if self.n_jobs == 0:
            self._err("run.n_jobs", "n_jobs must be nonzero")
        if self.n < 8 or self.n % 2:
            self._err("grid.n", "n must be an even integer >= 8")
        for key, v in (("grid.T", self.T), ("grid.dt", self.dt), ("grid.dt_factor", self.dt_factor)):
            if not v > 0:
                self._err(key, "must be positive")
        if any(d <= 0 for d in self.deltas):
            self._err("scales.deltas", "deltas must be positive")
        if list(self.deltas) != sorted(set(self.deltas), reverse=True):
            self._err("scales.deltas", "deltas must be strictly decreasing")
        if list(self.lambdas) != sorted(self.lambdas, reverse=True):
            self._err("scales.lambdas", "lambdas must be decreasing")
        if any(b <= 0 or b > 0.5 for b in self.blowup_scales):
            self._err("blowup.scales", "scales must lie in (0, 1/2]")
        if self.K < 1:
            self._err("model.K", "K must be at least 1")
        if self.paths < 1:
            self._err("model.paths", "paths must be positive")
        for k in self.kinds:
            if k not in KINDS:
                self._err("counterterms.kinds", f"unknown kind {k!r}")
        for o in self.objects:
            if o not in OBJECTS:
                self._err("moments.objects", f"unknown object {o!r}; choose from {OBJECTS}")
        for m in self.modes:
            if m not in MOMENT_MODES:
                self._err("moments.modes", f"unknown mode {m!r}; choose from {MOMENT_MODES}")
        if self.q < 1:
            self._err("moments.q", "q must be a positive integer")

    def require_resolvable(self, lambdas=False, blowup=False):
        """Grid-mollified commands need every delta to be at least two grid spacings,
        and test-function scales at least four.

        Counterterms are continuum integrals and skip this check.
        """
        h = 1.0 / self.n
        if self.deltas and min(self.deltas) < 2 * h:
            self._err("scales.deltas", f"delta {min(self.deltas)} is below two grid spacings ({2 * h})")
        if lambdas and self.lambdas and min(self.lambdas) < 4 * h:
            self._err("scales.lambdas", f"lambda {min(self.lambdas)} is below four grid spacings ({4 * h})")
        if blowup and min(self.blowup_scales) < 4 * h:
            self._err("blowup.scales", f"scale {min(self.blowup_scales)} is below four grid spacings ({4 * h})")

    def require(self, *keys):
        """Raise ConfigError for the first key among ``section.key`` names left empty."""
        for key in keys:
            attr = _ATTR.get(key, key.split(".")[-1])
            if not getattr(self, attr):
                raise ConfigError("required for this command but missing", key=key, lineno=self.lines.get(key))

    def canonical(self) -> dict:
        d = asdict(self)
        d.pop("source")
        d.pop("lines")
        d.pop("out")
        # execution detail only: serial and parallel runs share seeds and reduction order
        d.pop("n_jobs")
        d["spec"] = self.spec.to_dict()
        return d

    def digest(self) -> str:
        """sha256 of the canonical JSON of every field except the output location and job count."""
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed=None, replicas=None, out=None, serial=False):
        kw = {}
        if seed is not None:
            kw["seed"] = int(seed)
        if replicas is not None:
            kw["replicas"] = int(replicas)
        if out is not None:
            kw["out"] = str(out)
        if serial:
            kw["n_jobs"] = 1
        return replace(self, **kw) if kw else self

    def probe_setup(self, **kw):
        from .model_estimator import ProbeSetup

        base = dict(
            n=self.n, spec=self.spec, sigma_width=self.sigma_width, sigma_amp=self.sigma_amp, mu=self.mu,
            deltas=self.deltas, lambdas=self.lambdas, center=self.center, T=self.T, dt=self.dt,
            replicas=self.replicas, pilot_replicas=self.pilot_replicas, q=self.q, seed=self.seed,
            n_jobs=self.n_jobs, mollifier=self.mollifier, mesh=self.mesh, blowup_scales=self.blowup_scales,
            t_probe=self.t_probe, dt_factor=self.dt_factor, n_boot=self.n_boot,
            mean_zero_noise=self.mean_zero_noise, blowup_recentre=self.blowup_recentre,
        )
        base.update(kw)
        return ProbeSetup(**base)


_ATTR = {"scales.deltas": "deltas", "scales.lambdas": "lambdas", "blowup.scales": "blowup_scales",
         "counterterms.kinds": "kinds", "moments.objects": "objects", "moments.modes": "modes"}
_FIELD = {("blowup", "scales"): "blowup_scales", ("blowup", "recentre"): "blowup_recentre"}


def _key_lines(text):
    """``section.key -> line number`` from the raw text (configparser drops them)."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"([^=:\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            out[f"{section}.{m.group(1).strip()}"] = i
    return out


def _convert(kind, raw, key, lineno):
    try:
        if kind == "floats":
            vals = [v for v in re.split(r"[,\s]+", raw.strip()) if v]
            return tuple(_num(v) for v in vals)
        if kind == "words":
            return tuple(v for v in re.split(r"[,\s]+", raw.strip()) if v)
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "yes", "true", "on"):
                return True
            if low in ("0", "no", "false", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw.strip(), 0)
        if kind is float:
            return _num(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(str(exc), key=key, lineno=lineno) from None


def _num(v):
    v = v.strip()
    # dyadic shorthand: 2^-5
    m = re.fullmatch(r"2\^(-?\d+)", v)
    if m:
        return 2.0 ** int(m.group(1))
    return float(v)


def parse_config(text, source=None) -> ExperimentConfig:
    lines = _key_lines(text)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}", lineno=getattr(exc, "lineno", None)) from None
    kw, spec_kw = {}, {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError("unknown section", key=section)
        for key, raw in cp.items(section):
            full = f"{section}.{key}"
            kind = _SCHEMA[section].get(key)
            if kind is None:
                raise ConfigError("unknown key", key=full, lineno=lines.get(full))
            val = _convert(kind, raw, full, lines.get(full))
            if section == "coefficient" and key in _SPEC_KEYS:
                spec_kw[key] = val
            else:
                kw[_FIELD.get((section, key), key)] = val
    try:
        spec = MatrixMapSpec(**spec_kw)
    except ValueError as exc:
        raise ConfigError(str(exc), key="coefficient", lineno=lines.get("coefficient.lam0")) from None
    return ExperimentConfig(spec=spec, source=source, lines=lines, **kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    cfg = parse_config(text, source=str(path))
    env = os.environ.get(OUT_ENV)
    return cfg.with_overrides(out=env) if env else cfg
