import csv
import json
import textwrap

import pytest

from grouppop.cli import main
from grouppop.config import load_config, shipped_config
from grouppop.harness import replica_entropy, run_convergence_study, run_diagnostics, run_replicas

ZERO_RATES = textwrap.dedent("""
    [scenario]
    name = "frozen"
    ntypes = 1

    [rates]
    birth = 0.0
    death = 0.0

    [ladder]
    rungs = [[10, 40]]

    [replicas]
    count = 3
    seed = 5

    [time]
    horizon = 0.5
    snapshots = [0.0, 0.25, 0.5]

    [pde]
    upper = 4.0
    cells = 80
    dt = 0.01

    [initial]
    form = "uniform"
    lower = [1.0]
    upper = [2.0]
    height = 1.0

    [metrics]
    bank_size = 64

    [diagnostics]
    replicas = 20
    n = 10
    m = 40
""")


@pytest.fixture
def frozen(tmp_path):
    path = tmp_path / "frozen.toml"
    path.write_text(ZERO_RATES)
    return path


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_replica_seeds_are_distinct_per_rung_and_replica():
    seen = {tuple(replica_entropy(7, 0, r, k)) for r in range(3) for k in range(5)}
    assert len(seen) == 15
    assert replica_entropy(7, 1, 0, 0) != replica_entropy(7, 0, 0, 0)


def test_zero_rate_study_is_frozen(frozen):
    report = run_convergence_study(load_config(frozen))
    rho = [r for r in report.rows if r["metric"] == "rho_w"]
    assert len(rho) == 3
    assert len({r["median"] for r in rho}) == 1
    assert report.pde["escape_ok"]


def test_zero_rate_diagnostics_have_zero_residuals(frozen):
    report = run_diagnostics(load_config(frozen))
    assert report.passed
    assert report.fission_events == 0
    assert all(r.value == 0 for r in report.rows if r.check != "balance")


def test_replicas_reconstruct_the_balance_identity():
    results = run_replicas(load_config(shipped_config("minimal")))
    assert all(r.ok and r.balance_ok for r in results)


# -- command line --------------------------------------------------------


def test_validate_prints_hash(capsys):
    assert main(["validate", "minimal"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["name"] == "minimal" and len(out["config_hash"]) == 16


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text(ZERO_RATES.replace("rungs = [[10, 40]]", "rungs = [[20, 100], [10, 400]]"))
    assert main(["validate", str(bad)]) == 4
    bad.write_text(ZERO_RATES.replace("horizon = 0.5", "horizon = -1.0"))
    assert main(["validate", str(bad)]) == 6
    bad.write_text(ZERO_RATES.replace("[rates]", "[rates]\nbogus = 1\n[nonsense]"))
    assert main(["validate", str(bad)]) == 2
    assert main(["validate", str(tmp_path / "missing.toml")]) == 2


def test_study_files_carry_hash_and_rerun_identically(frozen, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["study", str(frozen), "--out-dir", str(a)]) == 0
    assert main(["study", str(frozen), "--out-dir", str(b), "--threads", "2"]) == 0
    ta, tb = tree(a), tree(b)
    assert ta == tb
    assert "timing.json" not in ta
    h = load_config(frozen).config_hash
    for name, data in ta.items():
        assert h.encode() in data, name


def test_study_timing_is_opt_in(frozen, tmp_path):
    assert main(["study", str(frozen), "--out-dir", str(tmp_path), "--timing", "--format", "json"]) == 0
    assert (tmp_path / "timing.json").exists() and (tmp_path / "study.json").exists()


def test_simulate_and_solve_outputs(frozen, tmp_path):
    assert main(["simulate", str(frozen), "--out-dir", str(tmp_path / "sim")]) == 0
    rung = tmp_path / "sim" / "n10_m40"
    assert (rung / "rep0000_trajectory.csv").exists() and (rung / "rep0002_counters.csv").exists()
    assert main(["solve", str(frozen), "--out-dir", str(tmp_path / "pde")]) == 0
    lines = (tmp_path / "pde" / "moments.csv").read_text().splitlines()
    assert lines[0].startswith("# grouppop")


def test_diagnose_exit_status(frozen, tmp_path, capsys):
    assert main(["diagnose", str(frozen), "--out-dir", str(tmp_path)]) == 0
    assert "FAIL" not in capsys.readouterr().out
    lines = (tmp_path / "diagnostics.csv").read_text().splitlines()
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 17 and all(r["passed"] == "True" for r in rows)
