"""Command-line entry point: ``grouppop {validate,simulate,solve,study,diagnose} CONFIG``.

CONFIG is a TOML path or the name of a bundled config.  Exit status is 0 on
success, the :class:`ConfigError` code on a rejected config, and 1 when a
run completes but its checks fail.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config, shipped_config
from .harness import (
    StudyFailed,
    run_convergence_study,
    run_diagnostics,
    run_replicas,
    solve_reference,
    write_diagnostics,
    write_simulations,
    write_solution,
    write_study,
)


def _resolve(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    return shipped_config(name)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grouppop", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"grouppop {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, outputs=True):
        p.add_argument("config", help="TOML config path or bundled config name")
        if outputs:
            p.add_argument("--out-dir", type=Path, default=None, help="output directory (default from config)")
            p.add_argument("--format", choices=("csv", "json"), default=None)
            p.add_argument("--threads", type=int, default=1, help="worker processes")
            p.add_argument("--seed-offset", type=int, default=0, help="added to every base seed")

    common(sub.add_parser("validate", help="parse the config and run the rate bound scan"), outputs=False)
    common(sub.add_parser("simulate", help="simulate every rung and replica, writing trajectories"))
    common(sub.add_parser("solve", help="solve the limit equation"))
    p = sub.add_parser("study", help="run the convergence study")
    common(p)
    p.add_argument("--timing", action="store_true", help="also write timing.json (not reproducible)")
    p = sub.add_parser("diagnose", help="compensated-counter diagnostics")
    common(p)
    p.add_argument("--replicas", type=int, default=None)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(_resolve(args.config))
    except ConfigError as exc:
        print(f"grouppop: config rejected: {exc}", file=sys.stderr)
        if exc.details:
            print(json.dumps(exc.details, sort_keys=True, default=str), file=sys.stderr)
        return exc.exit_status
    except FileNotFoundError as exc:
        print(f"grouppop: {exc}", file=sys.stderr)
        return 2

    if args.command == "validate":
        print(json.dumps({"config_hash": cfg.config_hash, "name": cfg.name, "ntypes": cfg.ntypes,
                          "ladder": cfg.ladder, "bounds": cfg.bounds_report}, sort_keys=True, default=str))
        return 0

    out = args.out_dir if args.out_dir is not None else Path(cfg.out_dir)
    fmt = args.format or cfg.out_format

    if args.command == "simulate":
        results = run_replicas(cfg, args.threads, args.seed_offset, keep_traj=True)
        write_simulations(results, cfg, args.seed_offset, out, fmt)
        bad = [r for r in results if not r.ok or not r.balance_ok]
        for r in bad:
            print(f"grouppop: replica n={r.n} m={r.m} #{r.replica} failed: {r.error or 'balance'}", file=sys.stderr)
        return 1 if bad else 0

    if args.command == "solve":
        traj = solve_reference(cfg, record_all=False)
        write_solution(traj, cfg, out, fmt)
        if traj.escaped > cfg.pde.escape_threshold:
            print(f"grouppop: escaped mass {traj.escaped:.3g} exceeds {cfg.pde.escape_threshold:g}", file=sys.stderr)
            return 1
        return 0

    if args.command == "study":
        try:
            report = run_convergence_study(cfg, args.threads, args.seed_offset)
        except StudyFailed as exc:
            print(f"grouppop: {exc}", file=sys.stderr)
            return 1
        write_study(report, cfg, out, fmt, timing=args.timing)
        return 0

    report = run_diagnostics(cfg, args.threads, args.seed_offset, args.replicas)
    write_diagnostics(report, cfg, out, fmt)
    for r in report.rows:
        flag = "ok  " if r.passed else "FAIL"
        print(f"{flag} {r.check:<10} {r.statistic:<26} {r.value:.4g} (limit {r.threshold:g})")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
