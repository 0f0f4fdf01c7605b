"""Replica orchestration, convergence studies, diagnostics and file output."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ScenarioConfig
from .metrics import GBank, TestFunctionBank, moments, pairing_gaps, rho_w
from .model import Population
from .pde import DensityGrid, DensityTrajectory, Grid, LimitCoefficients, solve
from .scaling import ScalingParams, density_step_function, empirical_measure
from .ssa import (
    FAMILIES,
    Scenario,
    Selector,
    _compensator_value,
    _counter_value,
    compensator_residual,
    predicted_qv,
    reconstruct_population,
    simulate,
)

FAILURE_THRESHOLD = 0.10


def replica_entropy(cfg_seed: int, seed_offset: int, rung: int, replica: int) -> list[int]:
    return [int(cfg_seed) + int(seed_offset), int(rung), int(replica)]


def _seeds(entropy):
    init, sim = np.random.SeedSequence(entropy).spawn(2)
    return init, sim


def _map(fn, tasks, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


# ----------------------------------------------------------------------------
# PDE reference


def initial_grid(cfg: ScenarioConfig) -> DensityGrid:
    grid = Grid(cfg.ntypes, cfg.pde.upper, cfg.pde.cells)
    if cfg.initial is None:
        raise ValueError("the PDE needs a closed-form initial density")
    return DensityGrid(grid, grid.evaluate(cfg.initial))


def limit_coefficients(cfg: ScenarioConfig) -> LimitCoefficients:
    return LimitCoefficients.from_rates(cfg.rates, cfg.law, cfg.pde.tabulate_n)


def solve_reference(cfg: ScenarioConfig, sample_times=None, record_all: bool = False) -> DensityTrajectory:
    times = cfg.snapshots if sample_times is None else sample_times
    return solve(limit_coefficients(cfg), initial_grid(cfg), cfg.horizon, cfg.pde.dt, times,
                 order=cfg.pde.order, record_all=record_all)


# ----------------------------------------------------------------------------
# Replicas


@dataclass
class ReplicaResult:
    n: int
    m: int
    replica: int
    entropy: list
    ok: bool
    error: str = ""
    snapshots: list = field(default_factory=list)   # (t, comps (P, l), counts (P,))
    events: int = 0
    fission_events: int = 0
    extinct_at: float | None = None
    balance_ok: bool = False
    initial_groups: int = 0


def _pop_arrays(pop: Population):
    items = sorted(pop.items())
    if not items:
        return np.zeros((0, pop.ntypes), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return (np.array([c for c, _ in items], dtype=np.int64), np.array([x for _, x in items], dtype=np.int64))


def _arrays_pop(ntypes, comps, counts) -> Population:
    pop = Population(ntypes)
    for c, x in zip(comps.tolist(), counts.tolist()):
        pop.add(tuple(c), x)
    return pop


def run_replica(task) -> ReplicaResult:
    cfg, rung, replica, seed_offset, keep_traj = task
    n, m = cfg.ladder[rung]
    entropy = replica_entropy(cfg.seed, seed_offset, rung, replica)
    res = ReplicaResult(n, m, replica, entropy, ok=False)
    try:
        init_seed, sim_seed = _seeds(entropy)
        pop = cfg.initial_population(n, m, init_seed)
        res.initial_groups = pop.group_count
        scen = Scenario(cfg.rates_at(n, m), cfg.law, pop, sample_times=cfg.snapshots, record_counters=keep_traj)
        traj = simulate(scen, cfg.horizon, sim_seed)
        res.snapshots = [(s.t, *_pop_arrays(s.population)) for s in traj.snapshots]
        res.events = traj.event_count
        res.fission_events = traj.fission_events
        res.extinct_at = traj.extinct_at
        res.balance_ok = reconstruct_population(pop, traj.final.counters) == traj.final.population
        res.ok = True
        if keep_traj:
            res.trajectory = traj
    except Exception as exc:  # quarantined; reported in the manifest
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def run_replicas(cfg: ScenarioConfig, threads: int = 1, seed_offset: int = 0, keep_traj: bool = False) -> list:
    tasks = [(cfg, r, j, seed_offset, keep_traj) for r in range(len(cfg.ladder)) for j in range(cfg.replicas)]
    return _map(run_replica, tasks, threads)


class StudyFailed(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# Convergence study


@dataclass
class ConvergenceReport:
    config_hash: str
    seed: int
    seed_offset: int
    rows: list            # summary rows
    per_replica: list     # raw per-replica metrics
    pairing: list         # per-(rung, t) median gap per g
    manifest: dict
    pde: dict

    def summary(self, metric: str, t: float) -> list:
        return [r for r in self.rows if r["metric"] == metric and abs(r["t"] - t) < 1e-12]

    def medians(self, metric: str, t: float) -> list:
        return [r["median"] for r in sorted(self.summary(metric, t), key=lambda r: (r["n"], r["m"]))]


def _stats(vals):
    v = np.asarray(vals, float)
    if v.size == 0:
        return float("nan"), float("nan"), float("nan")
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    return float(med), float(q25), float(q75)


def run_convergence_study(cfg: ScenarioConfig, threads: int = 1, seed_offset: int = 0) -> ConvergenceReport:
    t0 = time.perf_counter()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=1) as pde_pool:
            pde_future = pde_pool.submit(solve_reference, cfg)
            results = run_replicas(cfg, threads, seed_offset)
            ref = pde_future.result()
    else:
        ref = solve_reference(cfg)
        results = run_replicas(cfg, 1, seed_offset)
    failures = [r for r in results if not r.ok]
    if len(failures) > FAILURE_THRESHOLD * len(results):
        raise StudyFailed(f"{len(failures)} of {len(results)} replicas failed; first: {failures[0].error}")

    bank = TestFunctionBank(cfg.ntypes, cfg.bank_size, cfg.bank_seed, cfg.pde.upper)
    gbank = GBank(cfg.ntypes, cfg.pde.upper)
    targets = {float(t): DensityGrid(ref.grid, d, float(t)) for t, d in zip(ref.times, ref.densities)}
    target_stats = {t: moments(d) for t, d in targets.items()}

    per_replica = []
    gaps_by = {}
    for r in results:
        if not r.ok:
            continue
        s = ScalingParams(r.n, r.m)
        # the density view runs at m' = m / n**l, i.e. heights X n**l / m
        lp_factor = float(r.n) ** cfg.ntypes
        for t, comps, counts in r.snapshots:
            t = float(t)
            if cfg.censor_extinct and r.extinct_at is not None and r.extinct_at <= t:
                continue
            pop = _arrays_pop(cfg.ntypes, comps, counts)
            lam = empirical_measure(pop, s)
            mass, first = moments(lam)
            tmass, tfirst = target_stats[t]
            row = {
                "n": r.n, "m": r.m, "replica": r.replica, "t": t,
                "rho_w": rho_w(lam, targets[t], bank).value,
                "mass_gap": abs(mass - tmass),
                "moment_gap": abs(float(first.sum()) - float(tfirst.sum())),
            }
            step = density_step_function(pop, s)
            step.heights = step.heights * lp_factor
            gaps = pairing_gaps(step, targets[t], gbank)
            row["pairing_max_gap"] = float(gaps.max())
            gaps_by.setdefault((r.n, r.m, t), []).append(gaps)
            per_replica.append(row)

    rows = []
    for (n, m) in cfg.ladder:
        for t in sorted(targets):
            sel = [p for p in per_replica if p["n"] == n and p["m"] == m and p["t"] == t]
            for metric in ("rho_w", "mass_gap", "moment_gap", "pairing_max_gap"):
                med, q25, q75 = _stats([p[metric] for p in sel])
                rows.append({"n": n, "m": m, "t": t, "metric": metric, "median": med,
                             "q25": q25, "q75": q75, "iqr": q75 - q25, "replicas": len(sel)})
    pairing = []
    for (n, m, t), g in sorted(gaps_by.items()):
        pairing.append({"n": n, "m": m, "t": t, "median_gaps": np.median(np.array(g), axis=0).tolist()})

    manifest = {
        "config_hash": cfg.config_hash,
        "config_name": cfg.name,
        "seed": cfg.seed,
        "seed_offset": seed_offset,
        "version": __version__,
        "numpy": np.__version__,
        "bank": {"size": len(bank), "seed": bank.seed},
        "replicas": [
            {"n": r.n, "m": r.m, "replica": r.replica, "entropy": r.entropy, "ok": r.ok,
             "error": r.error, "events": r.events, "fission_events": r.fission_events,
             "initial_groups": r.initial_groups, "extinct_at": r.extinct_at, "balance_ok": r.balance_ok}
            for r in results
        ],
        "quarantined": len(failures),
    }
    pde = {
        "cells": cfg.pde.cells, "upper": cfg.pde.upper, "dt": cfg.pde.dt,
        "escaped_mass": ref.escaped, "escape_ok": ref.escaped <= cfg.pde.escape_threshold,
        "mass": {str(t): v[0] for t, v in target_stats.items()},
    }
    report = ConvergenceReport(cfg.config_hash, cfg.seed, seed_offset, rows, per_replica, pairing, manifest, pde)
    report.runtime = time.perf_counter() - t0
    return report


# ----------------------------------------------------------------------------
# Diagnostics


@dataclass
class DiagnosticRow:
    check: str
    statistic: str
    value: float
    threshold: float
    passed: bool

    def as_dict(self) -> dict:
        return {"check": self.check, "statistic": self.statistic, "value": self.value,
                "threshold": self.threshold, "passed": self.passed}


@dataclass
class DiagnosticsReport:
    config_hash: str
    seed: int
    rows: list
    replicas: int
    fission_events: int

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def row(self, check: str, statistic: str) -> DiagnosticRow:
        for r in self.rows:
            if r.check == check and r.statistic == statistic:
                return r
        raise KeyError((check, statistic))


def _selectors(ntypes: int) -> list:
    sels = []
    for fam in FAMILIES:
        if fam in ("B", "D", "M", "Mbar"):
            sels.extend(Selector(fam, None, k) for k in range(ntypes))
        else:
            sels.append(Selector(fam))
    return sels


def _label(sel: Selector, ntypes: int) -> str:
    if sel.family in ("B", "D", "M", "Mbar") and ntypes > 1:
        return f"{sel.family}[{sel.k}]"
    return sel.family


def diagnostic_replica(task) -> dict:
    """Terminal compensated counters and predicted variations for one replica."""
    rates, law, pop, horizon, seed, ntypes = task
    scen = Scenario(rates, law, pop, sample_times=(horizon,))
    traj = simulate(scen, horizon, seed)
    out = {"balance_ok": reconstruct_population(pop, traj.final.counters) == traj.final.population,
           "fission_events": traj.fission_events, "N": {}, "QV": {}}
    for sel in _selectors(ntypes):
        label = _label(sel, ntypes)
        out["N"][label] = float(compensator_residual(traj, sel)[1][-1])
        out["QV"][label] = float(predicted_qv(traj, sel)[1][-1])
    f, fbar = Selector("F"), Selector("Fbar")
    out["COV_F_Fbar"] = float(predicted_qv(traj, f, fbar)[1][-1])
    out["COV_M_Mbar"] = [float(predicted_qv(traj, Selector("M", None, k), Selector("Mbar", None, k))[1][-1])
                         for k in range(ntypes)]
    return out


def run_diagnostics(cfg: ScenarioConfig, threads: int = 1, seed_offset: int = 0,
                    replicas: int | None = None) -> DiagnosticsReport:
    from .config import parse_atoms

    dg = cfg.diagnostics
    R = replicas or dg.replicas
    pop = parse_atoms(dg.atoms, cfg.ntypes) if dg.atoms else cfg.initial_population(dg.n, dg.m, [dg.seed, 0])
    rates = cfg.rates_at(dg.n, dg.m)
    tasks = [(rates, cfg.law, pop, dg.horizon, [dg.seed + seed_offset, r], cfg.ntypes) for r in range(R)]
    outs = _map(diagnostic_replica, tasks, threads)
    rows = []
    for label in outs[0]["N"]:
        N = np.array([o["N"][label] for o in outs])
        QV = np.array([o["QV"][label] for o in outs])
        mean, sd = float(N.mean()), float(N.std(ddof=1)) if R > 1 else 0.0
        se = sd / math.sqrt(R)
        bound = dg.sigma * se
        rows.append(DiagnosticRow(label, "mean_over_se", mean / se if se > 0 else 0.0, dg.sigma,
                                  abs(mean) <= bound if se > 0 else abs(mean) < 1e-9))
        var = float(N.var(ddof=1)) if R > 1 else 0.0
        qv = float(QV.mean())
        rel = abs(var / qv - 1.0) if qv > 0 else (0.0 if var < 1e-12 else math.inf)
        rows.append(DiagnosticRow(label, "variance_vs_qv", rel, dg.qv_tolerance, rel <= dg.qv_tolerance))
    F = np.array([o["N"]["F"] for o in outs])
    Fb = np.array([o["N"]["Fbar"] for o in outs])
    pred = float(np.mean([o["COV_F_Fbar"] for o in outs]))
    emp = float(np.cov(F, Fb)[0, 1]) if R > 1 else 0.0
    rel = abs(emp / pred - 1.0) if pred > 0 else (0.0 if abs(emp) < 1e-12 else math.inf)
    rows.append(DiagnosticRow("F,Fbar", "covariance_vs_predicted", rel, dg.cov_tolerance, rel <= dg.cov_tolerance))
    for k in range(cfg.ntypes):
        suffix = f"[{k}]" if cfg.ntypes > 1 else ""
        M = np.array([o["N"]["M" + suffix] for o in outs])
        Mb = np.array([o["N"]["Mbar" + suffix] for o in outs])
        pred = float(np.mean([o["COV_M_Mbar"][k] for o in outs]))
        emp = float(np.cov(M, Mb)[0, 1]) if R > 1 else 0.0
        rel = abs(emp / pred - 1.0) if pred > 0 else (0.0 if abs(emp) < 1e-12 else math.inf)
        rows.append(DiagnosticRow("M,Mbar" + suffix, "covariance_vs_predicted", rel, dg.cov_tolerance,
                                  rel <= dg.cov_tolerance))
    bal = sum(o["balance_ok"] for o in outs)
    rows.append(DiagnosticRow("balance", "replicas_reconstructed", float(bal), float(R), bal == R))
    fissions = sum(o["fission_events"] for o in outs)
    return DiagnosticsReport(cfg.config_hash, dg.seed + seed_offset, rows, R, fissions)


# ----------------------------------------------------------------------------
# Output


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


def _csv(header_line: str, columns: list, rows: list) -> str:
    buf = io.StringIO()
    buf.write(header_line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def header(kind: str, cfg: ScenarioConfig, seed: int, seed_offset: int) -> str:
    return f"# grouppop {kind} config_hash={cfg.config_hash} seed={seed} seed_offset={seed_offset} version={__version__}"


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def write_study(report: ConvergenceReport, cfg: ScenarioConfig, out: Path, fmt: str = "csv",
                timing: bool = False) -> list:
    files = []
    if fmt == "csv":
        h = header("study", cfg, cfg.seed, report.seed_offset)
        cols = ["n", "m", "t", "metric", "median", "q25", "q75", "iqr", "replicas"]
        files.append(_write(out / "study.csv", _csv(h, cols, [[r[c] for c in cols] for r in report.rows])))
        cols = ["n", "m", "replica", "t", "rho_w", "mass_gap", "moment_gap", "pairing_max_gap"]
        files.append(_write(out / "study_replicas.csv",
                            _csv(h, cols, [[r[c] for c in cols] for r in report.per_replica])))
        files.append(_write(out / "study_pairing.csv",
                            _csv(h, ["n", "m", "t", "median_gaps"],
                                 [[p["n"], p["m"], p["t"], p["median_gaps"]] for p in report.pairing])))
    else:
        files.append(_write(out / "study.json", _json({
            "config_hash": cfg.config_hash, "seed": cfg.seed, "seed_offset": report.seed_offset,
            "rows": report.rows, "per_replica": report.per_replica, "pairing": report.pairing, "pde": report.pde,
        })))
    files.append(_write(out / "manifest.json", _json({**report.manifest, "pde": report.pde})))
    if timing:
        files.append(_write(out / "timing.json", _json({"runtime_seconds": getattr(report, "runtime", None)})))
    return files


def write_diagnostics(report: DiagnosticsReport, cfg: ScenarioConfig, out: Path, fmt: str = "csv") -> list:
    rows = [r.as_dict() for r in report.rows]
    meta = {"config_hash": cfg.config_hash, "seed": report.seed, "replicas": report.replicas,
            "fission_events": report.fission_events, "passed": report.passed}
    if fmt == "csv":
        h = header("diagnose", cfg, report.seed, 0)
        cols = ["check", "statistic", "value", "threshold", "passed"]
        return [_write(out / "diagnostics.csv", _csv(h, cols, [[r[c] for c in cols] for r in rows])),
                _write(out / "diagnostics_manifest.json", _json(meta))]
    return [_write(out / "diagnostics.json", _json({**meta, "rows": rows}))]


def _comp_str(c) -> str:
    return ";".join(str(int(v)) for v in c)


def counter_rows(traj) -> list:
    """``(t, kind, i, i', value, compensator)`` for every counter key at every snapshot."""
    rows = []
    for snap in traj.snapshots:
        if snap.counters is None:
            continue
        for fam in FAMILIES:
            for key, value in sorted(snap.counters[fam].items()):
                if fam in ("B", "D", "M", "Mbar"):
                    comp, k = key
                    sel = Selector(fam, comp, k)
                    kind, i, j = f"{fam}[{k}]", _comp_str(comp), ""
                elif fam == "F":
                    parent, child = key
                    sel = Selector(fam, parent, 0, child)
                    kind, i, j = fam, _comp_str(parent), _comp_str(child)
                else:
                    sel = Selector(fam, key)
                    kind, i, j = fam, _comp_str(key), ""
                rows.append([snap.t, kind, i, j, float(_counter_value(snap.counters, sel)),
                             float(_compensator_value(traj, snap, sel))])
    return rows


def write_simulations(results: list, cfg: ScenarioConfig, seed_offset: int, out: Path, fmt: str = "csv") -> list:
    files = []
    ell = cfg.ntypes
    manifest = {"config_hash": cfg.config_hash, "seed": cfg.seed, "seed_offset": seed_offset,
                "version": __version__, "runs": []}
    for r in results:
        stem = out / f"n{r.n}_m{r.m}" / f"rep{r.replica:04d}"
        manifest["runs"].append({"n": r.n, "m": r.m, "replica": r.replica, "entropy": r.entropy,
                                 "ok": r.ok, "error": r.error, "events": r.events,
                                 "balance_ok": r.balance_ok})
        if not r.ok:
            continue
        traj_rows = []
        for t, comps, counts in r.snapshots:
            for c, x in zip(comps.tolist(), counts.tolist()):
                traj_rows.append([float(t), *c, int(x)])
        crow = counter_rows(r.trajectory)
        h = header("simulate", cfg, cfg.seed, seed_offset) + f" n={r.n} m={r.m} replica={r.replica}"
        if fmt == "csv":
            files.append(_write(stem.with_name(stem.name + "_trajectory.csv"),
                                _csv(h, ["t"] + [f"i{k + 1}" for k in range(ell)] + ["count"], traj_rows)))
            files.append(_write(stem.with_name(stem.name + "_counters.csv"),
                                _csv(h, ["t", "kind", "i", "i_prime", "value", "compensator"], crow)))
        else:
            files.append(_write(stem.with_name(stem.name + ".json"), _json({
                "config_hash": cfg.config_hash, "entropy": r.entropy, "trajectory": traj_rows, "counters": crow})))
    files.append(_write(out / "manifest.json", _json(manifest)))
    return files


def write_solution(traj: DensityTrajectory, cfg: ScenarioConfig, out: Path, fmt: str = "csv") -> list:
    ell = cfg.ntypes
    pts = traj.grid.points()
    dens_rows = []
    for t, d in zip(traj.times, traj.densities):
        for j, (u, v) in enumerate(zip(pts.tolist(), d.ravel().tolist())):
            dens_rows.append([float(t), j, *u, v])
    mom_rows = [[float(t), float(R), *[float(x) for x in mo]]
                for t, R, mo in zip(traj.step_times, traj.mass, traj.moments)]
    meta = {"config_hash": cfg.config_hash, "cells": traj.grid.cells, "upper": traj.grid.upper,
            "dt": traj.dt, "order": traj.order, "escaped_mass": traj.escaped,
            "escape_ok": traj.escaped <= cfg.pde.escape_threshold, "version": __version__}
    if fmt == "csv":
        h = header("solve", cfg, cfg.seed, 0)
        return [
            _write(out / "density.csv", _csv(h, ["t", "cell"] + [f"u{k + 1}" for k in range(ell)] + ["value"],
                                             dens_rows)),
            _write(out / "moments.csv", _csv(h, ["t", "mass"] + [f"moment_{k + 1}" for k in range(ell)], mom_rows)),
            _write(out / "solve_manifest.json", _json(meta)),
        ]
    return [_write(out / "solution.json", _json({**meta, "density": dens_rows, "moments": mom_rows}))]
