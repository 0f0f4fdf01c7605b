"""Scenario configuration files (TOML) and initial conditions.

Sections: ``[scenario]``, ``[rates]``, ``[bounds]``, ``[fission_law]``,
``[ladder]``, ``[replicas]``, ``[time]``, ``[pde]``, ``[initial]``,
``[metrics]``, ``[output]`` and ``[diagnostics]``.  The README documents
every key.
"""
from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import (
    ConfigurationError,
    DeclaredBounds,
    FissionLaw,
    Population,
    RateSpec,
    make_law,
    make_rate,
    rate_bounds_check,
)

ERROR_CODES = {"schema": 2, "bounds": 3, "ladder": 4, "initial": 5, "horizon": 6}


class ConfigError(ValueError):
    """Invalid scenario; ``code`` is one of :data:`ERROR_CODES`."""

    def __init__(self, code: str, message: str, details: dict | None = None):
        super().__init__(f"[{code}] {message}")
        self.code = code
        self.exit_status = ERROR_CODES[code]
        self.details = details or {}


# ----------------------------------------------------------------------------
# Initial densities


@dataclass(frozen=True)
class InitialDensity:
    """Closed-form initial density on the orthant.

    ``uniform``: ``height`` on the box ``[lower, upper]``.
    ``biweight``: ``height (1 - r^2)^2`` for ``r = |u - center| / radius < 1``.
    ``gaussian``: ``peak exp(-|u - center|^2 / (2 sd^2))`` restricted to the orthant.
    """

    form: str
    ntypes: int
    params: dict

    def __call__(self, u) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, float))
        p = self.params
        inside_orthant = np.all(u >= 0, axis=1)
        if self.form == "uniform":
            lo, hi = np.asarray(p["lower"], float), np.asarray(p["upper"], float)
            val = np.where(np.all((u >= lo) & (u <= hi), axis=1), p["height"], 0.0)
        elif self.form == "biweight":
            r2 = np.sum((u - np.asarray(p["center"], float)) ** 2, axis=1) / p["radius"] ** 2
            val = np.where(r2 < 1, p["height"] * (1 - r2) ** 2, 0.0)
        else:
            d2 = np.sum((u - np.asarray(p["center"], float)) ** 2, axis=1)
            val = p["peak"] * np.exp(-d2 / (2 * p["sd"] ** 2))
        return np.where(inside_orthant, val, 0.0)

    @property
    def sup(self) -> float:
        return float(self.params.get("height", self.params.get("peak", 0.0)))

    def support_box(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        if self.form == "uniform":
            return np.maximum(np.asarray(p["lower"], float), 0), np.asarray(p["upper"], float)
        if self.form == "biweight":
            c = np.asarray(p["center"], float)
            return np.maximum(c - p["radius"], 0), c + p["radius"]
        c = np.asarray(p["center"], float)
        return np.maximum(c - 8 * p["sd"], 0), c + 8 * p["sd"]

    def mass(self) -> float:
        lo, hi = self.support_box()
        if np.any(hi <= lo):
            return 0.0
        panels = 400 if self.ntypes == 1 else 80
        x, w = np.polynomial.legendre.leggauss(6)
        edges = [np.linspace(a, b, panels + 1) for a, b in zip(lo, hi)]
        nodes, weights = [], []
        for e in edges:
            mid, half = 0.5 * (e[1:] + e[:-1]), 0.5 * np.diff(e)
            nodes.append((mid[:, None] + half[:, None] * x[None, :]).ravel())
            weights.append((half[:, None] * w[None, :]).ravel())
        mesh = np.stack([g.ravel() for g in np.meshgrid(*nodes, indexing="ij")], axis=1)
        wts = np.prod(np.stack([g.ravel() for g in np.meshgrid(*weights, indexing="ij")], axis=1), axis=1)
        return float(np.dot(self(mesh), wts))


_INITIAL_KEYS = {
    "uniform": {"lower", "upper", "height"},
    "biweight": {"center", "radius", "height"},
    "gaussian": {"center", "sd", "peak"},
}


def make_initial(spec: dict, ntypes: int) -> InitialDensity:
    spec = dict(spec)
    form = spec.pop("form", None)
    if form not in _INITIAL_KEYS:
        raise ConfigError("schema", f"initial.form must be one of {sorted(_INITIAL_KEYS)}, got {form!r}")
    missing = _INITIAL_KEYS[form] - set(spec)
    extra = set(spec) - _INITIAL_KEYS[form]
    if missing or extra:
        raise ConfigError("schema", f"initial ({form}): missing {sorted(missing)}, unexpected {sorted(extra)}")
    params = {}
    for k, v in spec.items():
        if isinstance(v, list):
            if len(v) != ntypes:
                raise ConfigError("schema", f"initial.{k} needs {ntypes} entries")
            params[k] = tuple(float(x) for x in v)
        else:
            params[k] = float(v)
    return InitialDensity(form, ntypes, params)


def sample_initial_population(x0: InitialDensity, n: int, m: int | float, seed) -> Population:
    """``ceil(m * mass)`` i.i.d. groups with composition ``floor(n u + 1/2)``, ``u ~ x0 / mass``.

    Rounding to the nearest lattice point keeps the atoms centred on the
    draws, so the first moment carries no half-cell bias.  Draws landing in
    the zero composition are rejected and redrawn.
    """
    mass = x0.mass()
    if not mass > 0:
        raise ConfigError("initial", "initial density has zero mass")
    count = int(math.ceil(m * mass - 1e-9))
    rng = np.random.default_rng(seed)
    lo, hi = x0.support_box()
    top = x0.sup
    ell = x0.ntypes
    pop = Population(ell)
    accepted = 0
    attempts = 0
    budget = 2000 * count + 100_000
    while accepted < count:
        batch = max(256, 2 * (count - accepted))
        u = lo + (hi - lo) * rng.random((batch, ell))
        keep = rng.random(batch) * top < x0(u)
        comps = np.floor(n * u[keep] + 0.5).astype(np.int64)
        comps = comps[np.any(comps > 0, axis=1)]
        attempts += batch
        for c in comps[: count - accepted]:
            pop.add(tuple(int(v) for v in c))
        accepted += min(len(comps), count - accepted)
        if attempts > budget and accepted == 0:
            raise ConfigError("initial", f"initial density puts no mass on nonzero compositions at n={n}")
    return pop


def parse_atoms(rows, ntypes: int) -> Population:
    """``[[i_1, ..., i_l, count], ...]`` to a population."""
    pop = Population(ntypes)
    for row in rows:
        if len(row) != ntypes + 1:
            raise ConfigError("schema", f"atom row {row!r} needs {ntypes} counts and a group count")
        comp, count = tuple(int(v) for v in row[:-1]), int(row[-1])
        if count < 0:
            raise ConfigError("schema", f"negative group count in {row!r}")
        if count and any(comp):
            pop.add(comp, count)
        elif count:
            raise ConfigError("initial", f"zero composition in atom list: {row!r}")
    return pop


# ----------------------------------------------------------------------------
# Scenario


@dataclass
class PDESettings:
    upper: float = 6.0
    cells: int = 600
    dt: float = 0.004
    order: str = "abc"
    tabulate_n: int | None = None
    escape_threshold: float = 1e-3


@dataclass
class DiagnosticsSettings:
    replicas: int = 200
    seed: int = 0
    horizon: float = 1.0
    n: int = 1
    m: int = 1
    atoms: list = field(default_factory=list)
    sigma: float = 3.0
    qv_tolerance: float = 0.15
    cov_tolerance: float = 0.20


@dataclass
class ScenarioConfig:
    name: str
    ntypes: int
    rates: RateSpec
    law: FissionLaw
    bounds: DeclaredBounds
    bounds_box: tuple | None
    ladder: list
    replicas: int
    seed: int
    censor_extinct: bool
    horizon: float
    snapshots: tuple
    pde: PDESettings
    initial: InitialDensity | None
    initial_atoms: dict
    bank_size: int
    bank_seed: int
    out_dir: str
    out_format: str
    diagnostics: DiagnosticsSettings
    raw: dict
    config_hash: str
    path: str | None = None
    bounds_report: dict = field(default_factory=dict)

    def rates_at(self, n: int, m: int) -> RateSpec:
        return self.rates.rescaled(n, m)

    def initial_population(self, n: int, m: int, seed) -> Population:
        key = f"{n},{m}"
        if key in self.initial_atoms:
            return self.initial_atoms[key].copy()
        if self.initial is None:
            raise ConfigError("initial", f"no initial condition for rung ({n}, {m})")
        return sample_initial_population(self.initial, n, m, seed)


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


_SECTIONS = {"scenario", "rates", "bounds", "fission_law", "ladder", "replicas", "time", "pde",
             "initial", "metrics", "output", "diagnostics"}


def _get(d: dict, key: str, kind, default=None, required=False, where=""):
    if key not in d:
        if required:
            raise ConfigError("schema", f"missing required key {where}{key}")
        return default
    v = d[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if kind is not None and not isinstance(v, kind):
        raise ConfigError("schema", f"{where}{key} has the wrong type ({type(v).__name__})")
    return v


def _per_type(spec, ntypes, name):
    if isinstance(spec, list):
        if len(spec) != ntypes:
            raise ConfigError("schema", f"rates.{name} needs {ntypes} entries")
        items = spec
    else:
        items = [spec] * ntypes
    try:
        return tuple(make_rate(s, ntypes) for s in items)
    except ConfigurationError as exc:
        raise ConfigError("schema", f"rates.{name}: {exc}") from None


def parse_config(raw: dict, path: str | None = None, *, check_bounds: bool = True) -> ScenarioConfig:
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ConfigError("schema", f"unknown sections {sorted(unknown)}")
    sc = raw.get("scenario", {})
    ntypes = _get(sc, "ntypes", int, required=True, where="scenario.")
    if ntypes < 1:
        raise ConfigError("schema", "scenario.ntypes must be >= 1")
    name = _get(sc, "name", str, default=Path(path).stem if path else "scenario", where="scenario.")

    r = raw.get("rates", {})
    try:
        rates = RateSpec(
            ntypes,
            _per_type(r.get("birth", 0.0), ntypes, "birth"),
            _per_type(r.get("death", 0.0), ntypes, "death"),
            _per_type(r.get("migration", 0.0), ntypes, "migration"),
            make_rate(r.get("fission", 0.0), ntypes),
            make_rate(r.get("extinction", 0.0), ntypes),
            extinction_scaling=_get(r, "extinction_scaling", str, "lln", where="rates."),
        )
        law = make_law(raw.get("fission_law", {"name": "uniform_box"}))
    except ConfigurationError as exc:
        raise ConfigError("schema", str(exc)) from None

    b = raw.get("bounds", {})
    bounds = DeclaredBounds(_get(b, "individual", float, where="bounds."),
                            _get(b, "fission", float, where="bounds."),
                            _get(b, "extinction", float, where="bounds."))
    bounds_box = b.get("box")

    lad = raw.get("ladder", {})
    rungs = _get(lad, "rungs", list, [[1, 1]], where="ladder.")
    ladder = []
    for rung in rungs:
        if not (isinstance(rung, list) and len(rung) == 2 and all(isinstance(v, int) and v >= 1 for v in rung)):
            raise ConfigError("schema", f"ladder rung {rung!r} must be [n, m] with positive integers")
        ladder.append((rung[0], rung[1]))
    for (n0, m0), (n1, m1) in zip(ladder, ladder[1:]):
        if not n1 > n0:
            raise ConfigError("ladder", f"ladder not increasing in n: ({n0},{m0}) -> ({n1},{m1})")
        if not m1 > m0:
            raise ConfigError("ladder", f"ladder not increasing in m: ({n0},{m0}) -> ({n1},{m1})")

    rep = raw.get("replicas", {})
    replicas = _get(rep, "count", int, 1, where="replicas.")
    seed = _get(rep, "seed", int, 0, where="replicas.")
    censor = _get(rep, "censor_extinct", bool, False, where="replicas.")
    if replicas < 1:
        raise ConfigError("schema", "replicas.count must be >= 1")

    tm = raw.get("time", {})
    horizon = _get(tm, "horizon", float, required=True, where="time.")
    if not horizon > 0:
        raise ConfigError("horizon", f"horizon must be positive, got {horizon}")
    snaps = tm.get("snapshots")
    if snaps is None:
        snaps = [0.0, horizon / 4, horizon / 2, 3 * horizon / 4, horizon]
    snaps = tuple(sorted(float(s) for s in snaps))
    if snaps and (snaps[0] < 0 or snaps[-1] > horizon):
        raise ConfigError("horizon", "snapshot times must lie in [0, horizon]")

    p = raw.get("pde", {})
    pde = PDESettings(
        upper=_get(p, "upper", float, 6.0, where="pde."),
        cells=_get(p, "cells", int, 600, where="pde."),
        dt=_get(p, "dt", float, 0.004, where="pde."),
        order=_get(p, "order", str, "abc", where="pde."),
        tabulate_n=_get(p, "tabulate_n", int, None, where="pde."),
        escape_threshold=_get(p, "escape_threshold", float, 1e-3, where="pde."),
    )

    init = raw.get("initial", {})
    initial = None
    atoms = {}
    if "form" in init:
        initial = make_initial({k: v for k, v in init.items() if k != "atoms"}, ntypes)
        mass = initial.mass()
        if not mass > 0:
            raise ConfigError("initial", "initial density has zero mass")
    for key, rows in init.get("atoms", {}).items():
        atoms[key] = parse_atoms(rows, ntypes)
        if atoms[key].group_count == 0:
            raise ConfigError("initial", f"initial atoms for rung {key} are empty")
    if initial is None and not atoms:
        raise ConfigError("initial", "no initial condition given")

    met = raw.get("metrics", {})
    out = raw.get("output", {})
    fmt = _get(out, "format", str, "csv", where="output.")
    if fmt not in ("csv", "json"):
        raise ConfigError("schema", "output.format must be csv or json")

    dg = raw.get("diagnostics", {})
    diagnostics = DiagnosticsSettings(
        replicas=_get(dg, "replicas", int, 200, where="diagnostics."),
        seed=_get(dg, "seed", int, seed, where="diagnostics."),
        horizon=_get(dg, "horizon", float, horizon, where="diagnostics."),
        n=_get(dg, "n", int, 1, where="diagnostics."),
        m=_get(dg, "m", int, 1, where="diagnostics."),
        atoms=_get(dg, "atoms", list, [], where="diagnostics."),
        sigma=_get(dg, "sigma", float, 3.0, where="diagnostics."),
        qv_tolerance=_get(dg, "qv_tolerance", float, 0.15, where="diagnostics."),
        cov_tolerance=_get(dg, "cov_tolerance", float, 0.20, where="diagnostics."),
    )

    cfg = ScenarioConfig(
        name=name, ntypes=ntypes, rates=rates, law=law, bounds=bounds,
        bounds_box=tuple(bounds_box) if bounds_box is not None else None,
        ladder=ladder, replicas=replicas, seed=seed, censor_extinct=censor,
        horizon=horizon, snapshots=snaps, pde=pde, initial=initial, initial_atoms=atoms,
        bank_size=_get(met, "bank_size", int, 512, where="metrics."),
        bank_seed=_get(met, "bank_seed", int, 0, where="metrics."),
        out_dir=_get(out, "dir", str, "out", where="output."), out_format=fmt,
        diagnostics=diagnostics, raw=raw, config_hash=config_hash(raw), path=path,
    )
    if check_bounds:
        validate_bounds(cfg)
    return cfg


def validate_bounds(cfg: ScenarioConfig) -> dict:
    """Run the lattice bound scan at the largest rung; raises on violation."""
    n, m = cfg.ladder[-1]
    if cfg.bounds_box is not None:
        box = cfg.bounds_box
    else:
        box = (int(math.ceil(cfg.pde.upper * n)),) * cfg.ntypes
    report = rate_bounds_check(cfg.rates_at(n, m), cfg.law, box, cfg.bounds)
    cfg.bounds_report = report.as_dict()
    if not report.ok:
        v = report.violations[0]
        raise ConfigError("bounds", f"{v.function} = {v.value:g} exceeds {v.bound:g} at i={v.point}",
                          report.as_dict())
    return cfg.bounds_report


def load_config(path, *, check_bounds: bool = True) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("schema", f"{path}: {exc}") from None
    return parse_config(raw, str(path), check_bounds=check_bounds)


def shipped_config(name: str) -> Path:
    """Path of a configuration file bundled with the package."""
    here = Path(__file__).parent / "configs"
    path = here / (name if name.endswith(".toml") else name + ".toml")
    if not path.exists():
        raise FileNotFoundError(f"no shipped config {name!r}; available: {sorted(p.stem for p in here.glob('*.toml'))}")
    return path
