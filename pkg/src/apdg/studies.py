"""Verification studies: configuration, sweeps, slope fits and output files.

A study is described by a TOML file (see ``configs/`` inside the package)
with top-level keys ``study`` and ``seed`` and the tables ``[physics]``,
``[discretization]``, ``[thresholds]`` and, for the manufactured and
Maxwellian studies, ``[manufactured]`` / ``[maxwellian]``.  Every key is
validated; all problems are reported together before anything runs.

Independent parameter points run on a thread pool; results are gathered in
configuration order so every output file is reproducible byte for byte.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
from scipy import stats

from .drift_diffusion import (THETA_USES, assemble_dd, dd_energy_report, initial_dd_state,
                              manufactured_reference, run_dd)
from .errors import ConfigurationError
from .kinetic import (FieldPreset, KineticState, ProblemData, assemble, energy_diagnostics,
                      evolution_residuals, evolution_terms, initial_state, make_phase_space,
                      moments, run, stability_constants)
from .maxwellian import (assumption_report, build_root_maxwellian, check_maxwellian_preconditions,
                         gamma_edges, symmetric_velocity_mesh)
from .mesh import DGSpace, Mesh1D, SpatialField, dual_gram, jump_average, zero_trace_space

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

STUDY_KINDS = ("eps_sweep", "h_sweep", "maxwellian_study", "stability_suite", "identity_suite")

DEFAULT_THRESHOLDS = {
    "slope_min": 0.35,
    "slope_max": 0.8,
    "r2_min": 0.9,
    "spread_max": 10.0,
    "order_min": 0.9,
    "l2_order_min": 1.8,
    "h1_order_min": 0.9,
    "theta_order_min": 0.9,
    "jump_exponent_min": 0.35,
    "identity_tol": 1e-11,
    "residual_tol": 1e-12,
    "scaling_tol": 1e-12,
    "energy_tol_factor": 10.0,
}

_PHYSICS_KEYS = {"theta", "L_factor", "T", "domain", "omega", "E", "rho0"}
_DISC_KEYS = {"n_x", "k_x", "n_v", "k_v", "beta", "eps", "dt_factor", "dt_power", "dt",
              "theta_use", "assert_theta_use", "eps_over_hx_max", "compare_coarse",
              "n_random", "evolution_T"}
_MANUFACTURED_KEYS = {"lam", "m", "profile", "scaling_factor"}
_MAXWELLIAN_KEYS = {"thetas", "h_factors"}


def _preset(d, name: str, errors: List[str]) -> FieldPreset:
    if isinstance(d, (int, float)):
        return FieldPreset("constant", float(d))
    if not isinstance(d, dict):
        errors.append(f"physics.{name} must be a number or a table")
        return FieldPreset()
    unknown = set(d) - {"kind", "c0", "c1", "m", "time_frequency"}
    if unknown:
        errors.append(f"physics.{name}: unknown keys {sorted(unknown)}")
    try:
        return FieldPreset(**{k: (v if k == "kind" else float(v)) for k, v in d.items()
                              if k not in unknown})
    except (ConfigurationError, TypeError, ValueError) as exc:
        errors.append(f"physics.{name}: {exc}")
        return FieldPreset()


def _as_tuple(v, cast) -> tuple:
    if isinstance(v, (list, tuple)):
        return tuple(cast(x) for x in v)
    return (cast(v),)


@dataclass(frozen=True)
class StudyConfig:
    """Validated description of one study.  Build with :func:`load_config` or
    :meth:`from_dict`; construct directly only in tests."""

    study: str
    seed: int = 0
    theta: float = 1.0
    L_factor: float = 6.0
    T: float = 0.1
    domain: Tuple[float, float] = (0.0, 1.0)
    omega: FieldPreset = FieldPreset("constant", 1.0)
    E: FieldPreset = FieldPreset("constant", 0.0)
    rho0: FieldPreset = FieldPreset("sinusoid", 0.0, 1.0, 1.0)
    n_x: Tuple[int, ...] = (16,)
    k_x: int = 1
    n_v: int = 16
    k_v: int = 1
    beta: Tuple[int, ...] = (0, 1)
    eps: Tuple[float, ...] = (1e-2,)
    dt_factor: float = 0.1
    dt_power: float = 1.0
    dt: Tuple[float, ...] = ()
    theta_use: Tuple[str, ...] = THETA_USES
    assert_theta_use: str = "kinetic_limit"
    eps_over_hx_max: float = 1.0
    compare_coarse: bool = True
    n_random: int = 100
    evolution_T: float = 0.02
    lam: Optional[float] = None
    m: int = 1
    profile: str = "sine"
    scaling_factor: float = 2.5
    thetas: Tuple[float, ...] = (0.5, 1.0, 2.0)
    h_factors: Tuple[float, ...] = (0.5, 0.25, 0.125)
    thresholds: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))

    # --- construction -----------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict, study: Optional[str] = None) -> "StudyConfig":
        errors: List[str] = []
        raw = dict(raw)
        kind = raw.pop("study", study)
        if study is not None and kind != study:
            errors.append(f"config declares study {kind!r} but {study!r} was requested")
        if kind not in STUDY_KINDS:
            errors.append(f"study must be one of {STUDY_KINDS}, got {kind!r}")
        kw = {"study": kind}
        if "seed" in raw:
            seed = raw.pop("seed")
            if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
                errors.append(f"seed must be an unsigned 64-bit integer, got {seed!r}")
            else:
                kw["seed"] = seed
        sections = {"physics": _PHYSICS_KEYS, "discretization": _DISC_KEYS,
                    "manufactured": _MANUFACTURED_KEYS, "maxwellian": _MAXWELLIAN_KEYS,
                    "thresholds": set(DEFAULT_THRESHOLDS)}
        for name in list(raw):
            if name not in sections:
                errors.append(f"unknown top-level key {name!r}")
        for sec, allowed in sections.items():
            tab = raw.get(sec, {})
            if not isinstance(tab, dict):
                errors.append(f"[{sec}] must be a table")
                continue
            for key in set(tab) - allowed:
                errors.append(f"[{sec}] unknown key {key!r}")
        phys = raw.get("physics", {}) if isinstance(raw.get("physics", {}), dict) else {}
        disc = raw.get("discretization", {}) if isinstance(raw.get("discretization", {}), dict) else {}
        man = raw.get("manufactured", {}) if isinstance(raw.get("manufactured", {}), dict) else {}
        mx = raw.get("maxwellian", {}) if isinstance(raw.get("maxwellian", {}), dict) else {}
        thr = raw.get("thresholds", {}) if isinstance(raw.get("thresholds", {}), dict) else {}

        def take(tab, key, cast, multi=False):
            if key not in tab:
                return
            try:
                kw[key] = _as_tuple(tab[key], cast) if multi else cast(tab[key])
            except (TypeError, ValueError) as exc:
                errors.append(f"{key}: cannot convert {tab[key]!r} ({exc})")

        for key in ("theta", "L_factor", "T"):
            take(phys, key, float)
        if "domain" in phys:
            d = phys["domain"]
            if not (isinstance(d, (list, tuple)) and len(d) == 2):
                errors.append("physics.domain must be a pair [a, b]")
            else:
                kw["domain"] = (float(d[0]), float(d[1]))
        for key in ("omega", "E", "rho0"):
            if key in phys:
                kw[key] = _preset(phys[key], key, errors)
        take(disc, "n_x", int, multi=True)
        take(disc, "beta", int, multi=True)
        take(disc, "eps", float, multi=True)
        take(disc, "dt", float, multi=True)
        take(disc, "theta_use", str, multi=True)
        for key in ("k_x", "n_v", "k_v", "n_random"):
            take(disc, key, int)
        for key in ("dt_factor", "dt_power", "eps_over_hx_max", "evolution_T"):
            take(disc, key, float)
        take(disc, "assert_theta_use", str)
        take(disc, "compare_coarse", bool)
        take(man, "lam", float)
        take(man, "m", int)
        take(man, "profile", str)
        take(man, "scaling_factor", float)
        take(mx, "thetas", float, multi=True)
        take(mx, "h_factors", float, multi=True)
        t = dict(DEFAULT_THRESHOLDS)
        for k, v in thr.items():
            if k in t:
                try:
                    t[k] = float(v)
                except (TypeError, ValueError):
                    errors.append(f"thresholds.{k} must be a number")
        kw["thresholds"] = t
        if errors:
            raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(errors))
        cfg = cls(**kw)
        validate_config(cfg)
        return cfg

    def as_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, FieldPreset):
                v = asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    # --- derived objects --------------------------------------------------
    @property
    def L(self) -> float:
        return self.L_factor * math.sqrt(self.theta)

    def data(self) -> ProblemData:
        return ProblemData(theta=self.theta, omega=self.omega, E=self.E, rho0=self.rho0,
                           domain=self.domain)

    def h_x(self, n_x: int) -> float:
        return (self.domain[1] - self.domain[0]) / n_x

    def time_step(self, n_x: int, eps: Optional[float] = None) -> Tuple[float, int]:
        """``(dt, n_steps)`` with ``n_steps dt = T``.

        Kinetic studies use ``dt_factor min(h_x, sqrt(eps))``; the manufactured
        study uses ``dt_factor h_x**dt_power``.
        """
        h = self.h_x(n_x)
        if eps is None:
            dt = self.dt_factor * h ** self.dt_power
        else:
            dt = self.dt_factor * min(h, math.sqrt(eps))
        n = max(1, int(math.ceil(self.T / dt - 1e-9)))
        return self.T / n, n


def _config_errors(cfg: StudyConfig) -> List[str]:
    errs: List[str] = []
    t = cfg.thresholds
    if cfg.study not in STUDY_KINDS:
        errs.append(f"unknown study {cfg.study!r}")
    if not cfg.theta > 0:
        errs.append(f"theta must be positive, got {cfg.theta}")
    if not cfg.T > 0:
        errs.append(f"T must be positive, got {cfg.T}")
    if not cfg.domain[1] > cfg.domain[0]:
        errs.append(f"domain must satisfy a < b, got {cfg.domain}")
    if cfg.omega.time_dependent:
        errs.append("omega must not depend on time")
    if not cfg.L_factor >= 1.0:
        errs.append(f"L = L_factor sqrt(theta) >= sqrt(theta) needs L_factor >= 1, got {cfg.L_factor}")
    if any(n < 2 for n in cfg.n_x):
        errs.append(f"every n_x must be >= 2, got {cfg.n_x}")
    if cfg.k_x < 0:
        errs.append("k_x must be >= 0")
    if cfg.k_v != 1:
        errs.append("only piecewise-linear velocity spaces are supported (k_v = 1)")
    if any(b not in (0, 1) for b in cfg.beta):
        errs.append(f"beta values must be 0 or 1, got {cfg.beta}")
    if cfg.k_x == 0 and 0 in cfg.beta:
        errs.append("k_x = 0 with beta = 0 locks (no continuous zero-trace subspace)")
    if any(not e > 0 for e in cfg.eps):
        errs.append(f"every eps must be positive, got {cfg.eps}")
    if any(not d > 0 for d in cfg.dt):
        errs.append(f"every dt must be positive, got {cfg.dt}")
    if not cfg.dt_factor > 0:
        errs.append("dt_factor must be positive")
    for tu in cfg.theta_use:
        if tu not in THETA_USES:
            errs.append(f"theta_use entries must be in {THETA_USES}, got {tu!r}")
    if cfg.assert_theta_use not in cfg.theta_use:
        errs.append(f"assert_theta_use {cfg.assert_theta_use!r} must be listed in theta_use")
    if cfg.profile not in ("sine", "parabola"):
        errs.append(f"manufactured.profile must be 'sine' or 'parabola', got {cfg.profile!r}")
    if t["slope_min"] > t["slope_max"]:
        errs.append("thresholds.slope_min exceeds slope_max")
    if cfg.study == "maxwellian_study":
        for th in cfg.thetas:
            if not th > 0:
                errs.append(f"maxwellian.thetas must be positive, got {th}")
                continue
            for f in cfg.h_factors:
                n = 2.0 * cfg.L_factor / f
                if abs(n - round(n)) > 1e-9 or round(n) % 2:
                    errs.append(f"2 L_factor / h_factor must be an even integer, got {n} for h_factor {f}")
                    continue
                try:
                    check_maxwellian_preconditions(
                        symmetric_velocity_mesh(cfg.L_factor * math.sqrt(th), int(round(n))), th)
                except ConfigurationError as exc:
                    errs.append(f"theta={th}, h_factor={f}: {exc}")
        if len(cfg.h_factors) < 3:
            errs.append("slope fits need at least three h_factors")
        return errs
    if cfg.n_v % 2:
        errs.append(f"n_v must be even (node at v = 0), got {cfg.n_v}")
    if cfg.theta > 0 and cfg.n_v >= 2 and cfg.L_factor > 0:
        try:
            check_maxwellian_preconditions(symmetric_velocity_mesh(cfg.L, cfg.n_v), cfg.theta)
        except ConfigurationError as exc:
            errs.append(str(exc))
    if errs:
        return errs
    try:
        data = cfg.data()
    except ConfigurationError as exc:
        return errs + [str(exc)]
    if cfg.study in ("eps_sweep", "stability_suite", "identity_suite"):
        if cfg.study != "identity_suite" and len(cfg.eps) < 3:
            errs.append("slope fits need at least three eps values")
        M = build_root_maxwellian(symmetric_velocity_mesh(cfg.L, cfg.n_v), cfg.theta)
        for n_x in cfg.n_x:
            spaces = make_phase_space(cfg.domain, n_x, cfg.k_x, cfg.L, cfg.n_v, cfg.k_v)
            thr = stability_constants(data, M, spaces).eps_threshold
            for e in cfg.eps:
                if cfg.study != "identity_suite" and e > thr:
                    errs.append(f"eps={e} exceeds the collision-dominance threshold {thr:.4g} "
                                f"(n_x={n_x}, n_v={cfg.n_v})")
                if cfg.study != "identity_suite" and e / cfg.h_x(n_x) > cfg.eps_over_hx_max:
                    errs.append(f"eps/h_x = {e / cfg.h_x(n_x):.3g} exceeds eps_over_hx_max="
                                f"{cfg.eps_over_hx_max} (n_x={n_x})")
    if cfg.study == "h_sweep":
        if cfg.k_x < 1:
            errs.append("the manufactured study needs k_x >= 1")
        if len(cfg.n_x) < 3:
            errs.append("slope fits need at least three n_x values")
    if cfg.study == "identity_suite" and len(cfg.dt) and len(cfg.dt) < 3:
        errs.append("the dt-refinement fit needs at least three dt values")
    return errs


def validate_config(cfg: StudyConfig) -> None:
    """Raise one ConfigurationError listing every violated requirement."""
    errs = _config_errors(cfg)
    if errs:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(errs))


def load_config(path, study: Optional[str] = None) -> StudyConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}") from exc
    return StudyConfig.from_dict(raw, study)


def default_config_path(study: str) -> Path:
    """Path of the configuration shipped with the package for ``study``."""
    return Path(str(resources.files("apdg") / "configs" / f"{study}.toml"))


# ---------------------------------------------------------------------------
# Results, fits, checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlopeFit:
    name: str
    x_label: str
    y_label: str
    x: Tuple[float, ...]
    y: Tuple[float, ...]
    slope: float
    intercept: float
    r2: float
    ci_low: float
    ci_high: float

    def as_dict(self) -> dict:
        d = asdict(self)
        d["x"], d["y"] = list(self.x), list(self.y)
        return d


def fit_slope(x: Sequence[float], y: Sequence[float], name: str = "fit",
              x_label: str = "x", y_label: str = "y") -> SlopeFit:
    """Least-squares line through ``(log x, log y)`` with R^2 and a 95% interval."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise ConfigurationError(f"{name}: a slope fit needs at least three points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))) or np.any(x <= 0) or np.any(y <= 0):
        nan = float("nan")
        return SlopeFit(name, x_label, y_label, tuple(x), tuple(y), nan, nan, nan, nan, nan)
    lx, ly = np.log(x), np.log(y)
    res = stats.linregress(lx, ly)
    tq = stats.t.ppf(0.975, x.size - 2)
    r2 = float(res.rvalue ** 2) if np.ptp(ly) > 0 else 1.0
    return SlopeFit(name, x_label, y_label, tuple(x.tolist()), tuple(y.tolist()),
                    float(res.slope), float(res.intercept), r2,
                    float(res.slope - tq * res.stderr), float(res.slope + tq * res.stderr))


@dataclass(frozen=True)
class Check:
    """One asserted relation ``lhs <relation> rhs`` with both sides recorded."""

    name: str
    lhs: float
    relation: str
    rhs: float
    passed: bool

    @classmethod
    def make(cls, name: str, lhs: float, relation: str, rhs) -> "Check":
        lhs = float(lhs)
        if relation == "in":
            lo, hi = float(rhs[0]), float(rhs[1])
            ok = math.isfinite(lhs) and lo <= lhs <= hi
            return cls(name, lhs, f"in[{lo!r},{hi!r}]", hi, ok)
        rhs = float(rhs)
        ok = math.isfinite(lhs) and math.isfinite(rhs)
        if relation == "<=":
            ok = ok and lhs <= rhs
        elif relation == "<":
            ok = ok and lhs < rhs
        elif relation == ">=":
            ok = ok and lhs >= rhs
        elif relation == ">":
            ok = ok and lhs > rhs
        else:
            raise ValueError(f"unknown relation {relation!r}")
        return cls(name, lhs, relation, rhs, ok)


@dataclass
class StudyResult:
    study: str
    seed: int
    columns: List[str]
    rows: List[dict] = field(default_factory=list)
    fits: List[SlopeFit] = field(default_factory=list)
    checks: List[Check] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)
    runtime: float = 0.0

    @property
    def has_nan(self) -> bool:
        for row in self.rows:
            for v in row.values():
                if isinstance(v, float) and math.isnan(v):
                    return True
        return any(math.isnan(c.lhs) or math.isnan(c.rhs) for c in self.checks)

    @property
    def passed(self) -> bool:
        return not self.has_nan and all(c.passed for c in self.checks)

    def check(self, name: str, lhs: float, relation: str, rhs) -> Check:
        c = Check.make(name, lhs, relation, rhs)
        self.checks.append(c)
        return c

    def fit(self, x, y, name, x_label, y_label) -> SlopeFit:
        f = fit_slope(x, y, name, x_label, y_label)
        self.fits.append(f)
        return f

    def summary(self) -> dict:
        status = "no assertions" if not self.checks else ("pass" if self.passed else "fail")
        return {
            "study": self.study,
            "seed": self.seed,
            "status": status,
            "passed": self.passed,
            "nan_detected": self.has_nan,
            "n_rows": len(self.rows),
            "checks": [asdict(c) for c in self.checks],
            "fits": [f.as_dict() for f in self.fits],
            "notes": list(self.notes),
        }


def _l2_time(sq_norms: Sequence[float], dt: float) -> float:
    """``sqrt(sum_n dt |u^n|^2)`` over the levels ``n = 1..N`` (right endpoints)."""
    return math.sqrt(dt * float(np.sum(sq_norms)))


def _pool_map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _spread(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=float)
    if v.size == 0 or not np.all(np.isfinite(v)):
        return float("nan")
    if np.all(v == 0):
        return 1.0
    if np.min(v) <= 0:
        return float("inf")
    return float(np.max(v) / np.min(v))


def _setup(cfg: StudyConfig, n_x: int):
    data = cfg.data()
    spaces = make_phase_space(cfg.domain, n_x, cfg.k_x, cfg.L, cfg.n_v, cfg.k_v)
    M = build_root_maxwellian(spaces.v.mesh, cfg.theta)
    return data, spaces, M


# ---------------------------------------------------------------------------
# eps sweep: kinetic density against the limit solver
# ---------------------------------------------------------------------------

def _kinetic_vs_limit(cfg: StudyConfig, n_x: int, beta: int, eps: float) -> dict:
    data, spaces, M = _setup(cfg, n_x)
    dt, n = cfg.time_step(n_x, eps)
    ops = assemble(spaces, M, data, beta, eps)
    hist = run(initial_state(data, M, spaces, eps, beta), ops, dt, n)
    Mb = spaces.x.mass()
    kin = [moments(s, ops) for s in hist[1:]]
    out = {"dt": dt, "n_steps": n}
    for tu in cfg.theta_use:
        dd_ops = assemble_dd(spaces.x, M, data, beta, tu)
        dd = run_dd(initial_dd_state(dd_ops, data.rho0_at), dd_ops, dt, n)[1:]
        er, eJ = [], []
        for (rho, J), d in zip(kin, dd):
            r = rho.coefficients - d.rho.broken_coefficients
            j = J.coefficients - d.J.coefficients
            er.append(r @ (Mb @ r))
            eJ.append(j @ (Mb @ j))
        out[f"err_rho_{tu}"] = _l2_time(er, dt)
        out[f"err_J_{tu}"] = _l2_time(eJ, dt)
    return out


def run_eps_sweep(cfg: StudyConfig, threads: int = 1) -> StudyResult:
    """L2-in-time distance between kinetic and limit densities over decreasing eps."""
    t0 = time.perf_counter()
    thr = cfg.thresholds
    cols = ["beta", "n_x", "eps", "dt", "n_steps", "sqrt_eps_over_hx"]
    for tu in cfg.theta_use:
        cols += [f"err_rho_{tu}", f"err_J_{tu}"]
    if cfg.compare_coarse:
        cols += ["coarse_n_x", "coarse_err_rho", "coarse_ratio", "predicted_ratio"]
    res = StudyResult("eps_sweep", cfg.seed, cols)
    n_x = cfg.n_x[0]
    points = [(b, e) for b in cfg.beta for e in cfg.eps]
    outs = _pool_map(lambda p: _kinetic_vs_limit(cfg, n_x, *p), points, threads)
    coarse = []
    if cfg.compare_coarse:
        cfg_c = replace(cfg, theta_use=(cfg.assert_theta_use,))
        coarse = _pool_map(lambda p: _kinetic_vs_limit(cfg_c, n_x // 2, *p), points, threads)
    key = f"err_rho_{cfg.assert_theta_use}"
    for i, ((b, e), o) in enumerate(zip(points, outs)):
        row = {"beta": b, "n_x": n_x, "eps": e, "dt": o["dt"], "n_steps": o["n_steps"],
               "sqrt_eps_over_hx": math.sqrt(e / cfg.h_x(n_x))}
        for tu in cfg.theta_use:
            row[f"err_rho_{tu}"] = o[f"err_rho_{tu}"]
            row[f"err_J_{tu}"] = o[f"err_J_{tu}"]
        if cfg.compare_coarse:
            c = coarse[i]
            row.update(coarse_n_x=n_x // 2, coarse_err_rho=c[key],
                       coarse_ratio=c[key] / o[key] if o[key] > 0 else float("nan"),
                       predicted_ratio=math.sqrt(2.0))
        res.rows.append(row)
    for b in cfg.beta:
        rows = [r for r in res.rows if r["beta"] == b]
        eps = [r["eps"] for r in rows]
        f = res.fit(eps, [r[key] for r in rows], f"rho_vs_eps_beta{b}", "eps",
                    f"|rho_eps - rho_0| ({cfg.assert_theta_use})")
        res.fit(eps, [r[f"err_J_{cfg.assert_theta_use}"] for r in rows], f"J_vs_eps_beta{b}", "eps",
                f"|J_eps - J_0| ({cfg.assert_theta_use})")
        res.check(f"rho slope beta={b}", f.slope, "in", (thr["slope_min"], thr["slope_max"]))
        res.check(f"rho fit R2 beta={b}", f.r2, ">=", thr["r2_min"])
    res.runtime = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# h sweep: limit solver against a manufactured solution
# ---------------------------------------------------------------------------

def _dd_error(cfg: StudyConfig, n_x: int, beta: int) -> dict:
    data = cfg.data()
    mesh_v = symmetric_velocity_mesh(cfg.L, cfg.n_v)
    M = build_root_maxwellian(mesh_v, cfg.theta)
    X = DGSpace(Mesh1D(cfg.domain[0], cfg.domain[1], n_x), cfg.k_x, "broken")
    rho_ex, J_ex, f = manufactured_reference(data, cfg.lam, cfg.m, cfg.profile)
    ops = assemble_dd(X, M, data, beta, "theta", forcing=f)
    dt, n = cfg.time_step(n_x)
    hist = run_dd(initial_dd_state(ops, lambda x: rho_ex(x, 0.0)), ops, dt, n)
    quad = X.quadrature(cfg.k_x + 5)
    last = hist[-1]
    e_rho = math.sqrt(quad.integrate(lambda x: (last.rho.evaluate(x) - rho_ex(x, last.t)) ** 2))
    e_J = math.sqrt(quad.integrate(lambda x: (last.J.evaluate(x) - J_ex(x, last.t)) ** 2))
    # energy bound and linear scaling, unforced
    free = ops.with_forcing(None)
    r0 = lambda x: rho_ex(x, 0.0)
    h1 = run_dd(initial_dd_state(free, r0), free, dt, n)
    rep = dd_energy_report(h1, free, cfg.thresholds["energy_tol_factor"])
    c = cfg.scaling_factor
    h2 = run_dd(initial_dd_state(free, lambda x: c * r0(x)), free, dt, n)
    h3 = run_dd(initial_dd_state(free, r0), free, dt, n)
    scale = max(np.linalg.norm(c * h1[-1].rho.coefficients), 1e-300)
    lin = max(np.linalg.norm(h2[-1].rho.coefficients - c * h1[-1].rho.coefficients) / scale,
              np.linalg.norm(h2[-1].J.coefficients - c * h1[-1].J.coefficients)
              / max(np.linalg.norm(c * h1[-1].J.coefficients), 1e-300))
    same = bool(np.array_equal(h1[-1].rho.coefficients, h3[-1].rho.coefficients)
                and np.array_equal(h1[-1].J.coefficients, h3[-1].J.coefficients))
    return {"dt": dt, "n_steps": n, "err_rho": e_rho, "err_J": e_J,
            "energy_lhs": rep.lhs, "energy_rhs": rep.rhs, "energy_rhs_linear": rep.rhs_linear_exponent,
            "energy_tol": rep.tolerance, "scaling_residual": float(lin), "rerun_identical": same}


def run_h_sweep(cfg: StudyConfig, threads: int = 1) -> StudyResult:
    """Manufactured-solution convergence of the limit solver under h refinement."""
    t0 = time.perf_counter()
    thr = cfg.thresholds
    cols = ["beta", "n_x", "h_x", "dt", "n_steps", "err_rho", "err_J", "energy_lhs", "energy_rhs",
            "energy_rhs_linear", "energy_tol", "scaling_residual", "rerun_identical"]
    res = StudyResult("h_sweep", cfg.seed, cols)
    points = [(b, n) for b in cfg.beta for n in cfg.n_x]
    outs = _pool_map(lambda p: _dd_error(cfg, p[1], p[0]), points, threads)
    for (b, n), o in zip(points, outs):
        res.rows.append({"beta": b, "n_x": n, "h_x": cfg.h_x(n), **o})
    for b in cfg.beta:
        rows = [r for r in res.rows if r["beta"] == b]
        h = [r["h_x"] for r in rows]
        f = res.fit(h, [r["err_rho"] for r in rows], f"rho_vs_h_beta{b}", "h_x", "|rho_h - rho|")
        res.fit(h, [r["err_J"] for r in rows], f"J_vs_h_beta{b}", "h_x", "|J_h - J|")
        res.check(f"rho order beta={b}", f.slope, ">=", thr["order_min"])
        res.check(f"rho fit R2 beta={b}", f.r2, ">=", thr["r2_min"])
        for r in rows:
            tag = f"beta={b} n_x={r['n_x']}"
            res.check(f"energy bound {tag}", r["energy_lhs"], "<=", r["energy_rhs"] * (1 + r["energy_tol"]))
            res.check(f"energy bound (linear exponent) {tag}", r["energy_lhs"], "<=",
                      r["energy_rhs_linear"] * (1 + r["energy_tol"]))
            res.check(f"linear scaling {tag}", r["scaling_residual"], "<=", thr["scaling_tol"])
            res.check(f"rerun identical {tag}", float(r["rerun_identical"]), ">=", 1.0)
    res.runtime = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# Maxwellian certification
# ---------------------------------------------------------------------------

def run_maxwellian_study(cfg: StudyConfig, threads: int = 1) -> StudyResult:
    """Structural residuals, interpolation errors and orders of the discrete Maxwellian."""
    t0 = time.perf_counter()
    thr = cfg.thresholds
    cols = ["theta", "L", "h_v", "n_cells", "theta_h", "residual_mass", "residual_symmetry",
            "residual_energy", "residual_momentum", "l2_error", "l2_bound", "h1_error", "h1_bound",
            "gamma_I", "gamma_B_plus", "gamma_B_minus", "gamma_star"]
    res = StudyResult("maxwellian_study", cfg.seed, cols)
    points = [(th, f) for th in cfg.thetas for f in cfg.h_factors]

    def one(p):
        th, f = p
        L = cfg.L_factor * math.sqrt(th)
        n = int(round(2.0 * cfg.L_factor / f))
        return assumption_report(build_root_maxwellian(symmetric_velocity_mesh(L, n), th))

    reports = _pool_map(one, points, threads)
    for rep in reports:
        row = rep.as_row()
        res.rows.append({k: row[k] for k in cols})
    for th in cfg.thetas:
        rows = [r for r in res.rows if r["theta"] == th]
        h = [r["h_v"] for r in rows]
        tag = f"theta={th!r}"
        for r in rows:
            rt = f"{tag} h_v={r['h_v']!r}"
            for key in ("residual_mass", "residual_symmetry", "residual_momentum"):
                res.check(f"{key} {rt}", abs(r[key]), "<", thr["residual_tol"])
            res.check(f"L2 bound {rt}", r["l2_error"], "<=", r["l2_bound"])
            res.check(f"H1 bound {rt}", r["h1_error"], "<=", r["h1_bound"])
            res.check(f"gamma_star positive {rt}", r["gamma_star"], ">", 0.0)
        f2 = res.fit(h, [r["l2_error"] for r in rows], f"l2_error_{tag}", "h_v", "L2 error")
        f1 = res.fit(h, [r["h1_error"] for r in rows], f"h1_error_{tag}", "h_v", "H1 error")
        ft = res.fit(h, [abs(r["theta_h"] - th) for r in rows], f"theta_h_{tag}", "h_v", "|theta_h - theta|")
        res.check(f"L2 order {tag}", f2.slope, ">=", thr["l2_order_min"])
        res.check(f"H1 order {tag}", f1.slope, ">=", thr["h1_order_min"])
        res.check(f"theta_h order {tag}", ft.slope, ">=", thr["theta_order_min"])
    res.runtime = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# Stability suite
# ---------------------------------------------------------------------------

def _stability_point(cfg: StudyConfig, n_x: int, beta: int, eps: float) -> dict:
    data, spaces, M = _setup(cfg, n_x)
    dt, n = cfg.time_step(n_x, eps)
    ops = assemble(spaces, M, data, beta, eps)
    hist = run(initial_state(data, M, spaces, eps, beta), ops, dt, n)
    rep = energy_diagnostics(hist, ops, cfg.thresholds["energy_tol_factor"])
    X = spaces.x
    Mb = X.mass()
    Jf = X.jump_form
    test = zero_trace_space(X, beta)
    chol = sla.cho_factor(dual_gram(X, beta).toarray())
    g0 = math.sqrt(rep.g0_sq)
    relax, cur, jump, dtr = [], [], [], []
    rho_prev = ops.P_rho @ hist[0].g
    for s in hist[1:]:
        rho, J = moments(s, ops)
        gt = s.g - ops.equilibrium(rho.coefficients)
        relax.append(gt @ (ops.Mass @ gt))
        cur.append(J.coefficients @ (Mb @ J.coefficients))
        jump.append(rho.coefficients @ (Jf @ rho.coefficients))
        b = test.embedding.T @ (Mb @ ((rho.coefficients - rho_prev) / dt))
        dtr.append(b @ sla.cho_solve(chol, b))
        rho_prev = rho.coefficients
    scale = g0 if g0 > 0 else 1.0
    return {
        "dt": dt, "n_steps": n, "eps_threshold": rep.eps_threshold, "C3": rep.C3,
        "g0_norm": g0, "energy_lhs": rep.lhs, "energy_rhs": rep.rhs, "energy_tol": rep.tolerance,
        "energy_asserted": rep.asserted,
        "relaxation_ratio": _l2_time(relax, dt) / eps / scale,
        "current_ratio": _l2_time(cur, dt) / scale,
        "dt_rho_dual_ratio": _l2_time(dtr, dt) / scale,
        "rho_jump_norm": _l2_time(jump, dt),
        "gamma_star": ops.gamma.gamma_star,
    }


def run_stability_suite(cfg: StudyConfig, threads: int = 1) -> StudyResult:
    """Energy estimate and eps-uniform bounds of dissipation, current and time derivative."""
    t0 = time.perf_counter()
    thr = cfg.thresholds
    cols = ["beta", "n_x", "eps", "dt", "n_steps", "eps_threshold", "C3", "g0_norm", "energy_lhs",
            "energy_rhs", "energy_tol", "energy_asserted", "relaxation_ratio", "current_ratio",
            "dt_rho_dual_ratio", "rho_jump_norm", "gamma_star"]
    res = StudyResult("stability_suite", cfg.seed, cols)
    n_x = cfg.n_x[0]
    points = [(b, e) for b in cfg.beta for e in cfg.eps]
    outs = _pool_map(lambda p: _stability_point(cfg, n_x, *p), points, threads)
    for (b, e), o in zip(points, outs):
        res.rows.append({"beta": b, "n_x": n_x, "eps": e, **o})
    for b in cfg.beta:
        rows = [r for r in res.rows if r["beta"] == b]
        for r in rows:
            tag = f"beta={b} eps={r['eps']!r}"
            res.check(f"energy estimate {tag}", r["energy_lhs"], "<=", r["energy_rhs"] * (1 + r["energy_tol"]))
            res.check(f"gamma_star positive {tag}", r["gamma_star"], ">", 0.0)
        for key in ("relaxation_ratio", "current_ratio", "dt_rho_dual_ratio"):
            res.check(f"{key} spread beta={b}", _spread([r[key] for r in rows]), "<", thr["spread_max"])
        f = res.fit([r["eps"] for r in rows], [r["rho_jump_norm"] for r in rows],
                    f"rho_jump_vs_eps_beta{b}", "eps", "|[[rho]]|")
        if b == 0:
            res.check("rho jump exponent beta=0", f.slope, ">=", thr["jump_exponent_min"])
    res.runtime = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# Identity suite
# ---------------------------------------------------------------------------

def _random_unit(rng: np.random.Generator, Mass, n: int) -> np.ndarray:
    g = rng.standard_normal(n)
    return g / math.sqrt(g @ (Mass @ g))


def _identity_values(cfg: StudyConfig, beta: int, eps: float, seed: int) -> Dict[str, float]:
    """Worst residual of every exact identity over ``n_random`` seeded fields."""
    data, spaces, M = _setup(cfg, cfg.n_x[0])
    ops = assemble(spaces, M, data, beta, eps)
    X = spaces.x
    rng = np.random.default_rng([seed, beta, int(round(-math.log10(eps) * 1000))])
    p = ops.parts
    Z = ops.isotropic_test()
    Mx = X.mass()
    S = DGSpace(X.mesh, X.degree, "continuous").embedding if X.degree >= 1 else None
    wmin = data.omega_min_on(X)
    worst = dict.fromkeys(
        ["A_quadratic", "Q_coercivity", "B_equals_C_isotropic", "D_neutral", "C_equilibrium",
         "J_two_forms", "integration_by_parts", "jump_average_traces", "theta1_continuous_test",
         "density_identity", "current_identity", "rho_bounded_by_g"], 0.0)
    for _ in range(cfg.n_random):
        g = _random_unit(rng, ops.Mass, spaces.dof_count)
        rho = ops.P_rho @ g
        gt = g - ops.equilibrium(rho)
        a = g @ (ops.A @ g)
        a2 = g @ (p["A_bd_sym"] @ g) + eps ** beta * (g @ (p["A_pen"] @ g))
        worst["A_quadratic"] = max(worst["A_quadratic"], abs(a - a2))
        q = -(g @ (ops.Q @ g)) - wmin * (gt @ (ops.Mass @ gt))
        worst["Q_coercivity"] = max(worst["Q_coercivity"], max(0.0, -q))
        worst["B_equals_C_isotropic"] = max(worst["B_equals_C_isotropic"],
                                            float(np.max(np.abs(Z.T @ ((ops.B - ops.C) @ g)))))
        worst["D_neutral"] = max(worst["D_neutral"], float(np.max(np.abs(Z.T @ (ops.D @ g)))))
        e = ops.equilibrium(rho)
        worst["C_equilibrium"] = max(worst["C_equilibrium"], abs(e @ (ops.C @ e)))
        st = KineticState(g, eps, beta)
        J1 = moments(st, ops)[1].coefficients
        J2 = moments(st, ops, "defect")[1].coefficients
        worst["J_two_forms"] = max(worst["J_two_forms"], float(np.max(np.abs(J1 - J2))) * eps)
        worst["rho_bounded_by_g"] = max(worst["rho_bounded_by_g"],
                                        max(0.0, math.sqrt(rho @ (Mx @ rho)) - 1.0))
        # integration by parts and traces on the x space
        u, w = rng.standard_normal(X.dof_count), rng.standard_normal(X.dof_count)
        G, Jm, Av = X.gradient, X.jump, X.average
        TL, TR = X.trace_left, X.trace_right
        ibp = (u @ (G @ w) + w @ (G @ u) - (Av @ u) @ (Jm @ w) - (Jm @ u) @ (Av @ w)
               - float((TR @ u) @ (TR @ w)) + float((TL @ u) @ (TL @ w)))
        worst["integration_by_parts"] = max(worst["integration_by_parts"], abs(ibp))
        fu = SpatialField(X, u)
        for k in range(1, X.mesh.n_cells):
            jmp, avg = jump_average(fu, k)
            xe = X.mesh.nodes[k]
            left = float(fu.evaluate(np.array([xe]), side="left")[0])
            right = float(fu.evaluate(np.array([xe]), side="right")[0])
            worst["jump_average_traces"] = max(worst["jump_average_traces"],
                                               abs(jmp - (left - right)), abs(avg - 0.5 * (left + right)))
        # evolution identities on one implicit step
        dt = 0.01
        g1 = run(st, ops, dt, 1)[-1]
        if S is not None:
            t1 = evolution_terms(g, g1.g, ops, dt)["density"]["theta1"]
            worst["theta1_continuous_test"] = max(worst["theta1_continuous_test"],
                                                  float(np.max(np.abs(S.T @ t1))))
        rep = evolution_residuals(st, g1, ops, mode="implicit")
        worst["density_identity"] = max(worst["density_identity"], rep.density_relative)
        worst["current_identity"] = max(worst["current_identity"], rep.current_relative)
    worst["velocity_boundary_cancellation"] = abs(M.values[-1] ** 2 - M.values[0] ** 2) * data.E_sup
    worst["gamma_star"] = gamma_edges(M).gamma_star
    return worst


def _evolution_slope_point(cfg: StudyConfig, beta: int, eps: float, dt: float) -> Tuple[float, float]:
    data, spaces, M = _setup(cfg, cfg.n_x[0])
    ops = assemble(spaces, M, data, beta, eps)
    n = max(1, int(round(cfg.evolution_T / dt)))
    hist = run(initial_state(data, M, spaces, eps, beta), ops, dt, n)
    rep = evolution_residuals(hist[-2], hist[-1], ops, mode="lagged")
    return rep.density_relative, rep.current_relative


def run_identity_suite(cfg: StudyConfig, threads: int = 1) -> StudyResult:
    """Exact structural identities on random fields and dt-refinement of the evolution identities."""
    t0 = time.perf_counter()
    thr = cfg.thresholds
    cols = ["beta", "eps", "quantity", "dt", "value", "tolerance"]
    res = StudyResult("identity_suite", cfg.seed, cols)
    points = [(b, e) for b in cfg.beta for e in cfg.eps]
    outs = _pool_map(lambda p: _identity_values(cfg, p[0], p[1], cfg.seed), points, threads)
    for (b, e), vals in zip(points, outs):
        for name, v in vals.items():
            tol = float("nan") if name == "gamma_star" else thr["identity_tol"]
            res.rows.append({"beta": b, "eps": e, "quantity": name, "dt": "", "value": float(v),
                             "tolerance": tol if name != "gamma_star" else ""})
            if name == "gamma_star":
                res.check(f"gamma_star positive beta={b} eps={e!r}", v, ">", 0.0)
            else:
                res.check(f"{name} beta={b} eps={e!r}", v, "<=", thr["identity_tol"])
    dts = cfg.dt or (4e-3, 2e-3, 1e-3, 5e-4)
    evo = [(b, e, d) for b in cfg.beta for e in cfg.eps for d in dts]
    vals = _pool_map(lambda p: _evolution_slope_point(cfg, *p), evo, threads)
    for (b, e, d), (rd, rc) in zip(evo, vals):
        res.rows.append({"beta": b, "eps": e, "quantity": "density_lagged_residual", "dt": d,
                         "value": rd, "tolerance": ""})
        res.rows.append({"beta": b, "eps": e, "quantity": "current_lagged_residual", "dt": d,
                         "value": rc, "tolerance": ""})
    for b in cfg.beta:
        for e in cfg.eps:
            sel = [(d, v) for (bb, ee, d), v in zip(evo, vals) if bb == b and ee == e]
            x = [d for d, _ in sel]
            for i, nm in enumerate(("density", "current")):
                f = res.fit(x, [v[i] for _, v in sel], f"{nm}_residual_beta{b}_eps{e!r}", "dt",
                            f"{nm} identity residual")
                res.check(f"{nm} residual order beta={b} eps={e!r}", f.slope, ">=", thr["order_min"])
    res.runtime = time.perf_counter() - t0
    return res


RUNNERS = {
    "eps_sweep": run_eps_sweep,
    "h_sweep": run_h_sweep,
    "maxwellian_study": run_maxwellian_study,
    "stability_suite": run_stability_suite,
    "identity_suite": run_identity_suite,
}


def run_study(cfg: StudyConfig, threads: int = 1) -> StudyResult:
    return RUNNERS[cfg.study](cfg, threads)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _json_safe(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else repr(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_csv(result: StudyResult, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(result.columns)
        for row in result.rows:
            wr.writerow([_fmt(row.get(c, "")) for c in result.columns])


def write_plot(fit: SlopeFit, path) -> None:
    """Log-log scatter with the fitted line; deterministic SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "apdg", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        x, y = np.asarray(fit.x), np.asarray(fit.y)
        ok = (x > 0) & (y > 0)
        ax.loglog(x[ok], y[ok], "o", label="measured")
        if math.isfinite(fit.slope):
            xs = np.geomspace(x[ok].min(), x[ok].max(), 50)
            ax.loglog(xs, np.exp(fit.intercept) * xs ** fit.slope, "-", label="fit")
        ax.set_xlabel(fit.x_label)
        ax.set_ylabel(fit.y_label)
        ax.set_title(f"{fit.name}: slope {fit.slope:.3f} (R2 {fit.r2:.3f})")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_outputs(result: StudyResult, cfg: StudyConfig, out_dir) -> Dict[str, Path]:
    """Write ``<study>.csv``, ``<study>_summary.json`` and one SVG per slope fit."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / f"{result.study}.csv", "summary": out / f"{result.study}_summary.json"}
        write_csv(result, paths["csv"])
        summary = result.summary()
        summary["config"] = cfg.as_dict()
        summary["runtime_seconds"] = result.runtime
        with open(paths["summary"], "w", newline="\n") as fh:
            json.dump(_json_safe(summary), fh, indent=2, sort_keys=True)
            fh.write("\n")
        for f in result.fits:
            safe = "".join(ch if ch.isalnum() or ch in "_-." else "_" for ch in f.name)
            p = out / f"{result.study}_{safe}.svg"
            write_plot(f, p)
            paths[f.name] = p
    except OSError as exc:
        raise OSError(f"cannot write outputs under {out}: {exc}") from exc
    return paths


def env_threads(default: int = 1) -> int:
    v = os.environ.get("APDG_THREADS")
    try:
        return max(1, int(v)) if v else default
    except ValueError:
        raise ConfigurationError(f"APDG_THREADS must be an integer, got {v!r}")


def env_out(default: str = "results") -> str:
    return os.environ.get("APDG_OUT", default)
