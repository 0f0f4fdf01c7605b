import numpy as np
import pytest

from grouppop.config import (
    ConfigError,
    load_config,
    make_initial,
    parse_config,
    sample_initial_population,
    shipped_config,
)
from grouppop.metrics import TestFunctionBank, rho_w
from grouppop.model import Remark2Fission, UniformBoxLaw, totals
from grouppop.pde import DensityGrid, Grid
from grouppop.scaling import ScalingParams, empirical_measure


def minimal_raw(**sections):
    raw = {
        "scenario": {"name": "t", "ntypes": 1},
        "rates": {"birth": 0.5, "death": 0.5},
        "ladder": {"rungs": [[4, 10], [8, 20]]},
        "time": {"horizon": 0.5},
        "initial": {"form": "uniform", "lower": [1.0], "upper": [2.0], "height": 1.0},
    }
    raw.update(sections)
    return raw


def test_minimal_shipped_config_loads():
    cfg = load_config(shipped_config("minimal"))
    assert cfg.ntypes == 1 and cfg.ladder == [(4, 10), (8, 20)]
    assert len(cfg.config_hash) == 16


def test_remark2_reference_config_reproduces_the_scenario():
    cfg = load_config(shipped_config("remark2_reference"))
    assert isinstance(cfg.rates.fission, Remark2Fission)
    assert isinstance(cfg.law, UniformBoxLaw)
    assert cfg.ladder == [(10, 50), (20, 200), (40, 800)]
    assert cfg.bounds_report["ok"]


def test_ladder_not_increasing_in_n():
    with pytest.raises(ConfigError) as err:
        parse_config(minimal_raw(ladder={"rungs": [[20, 100], [10, 400]]}))
    assert err.value.code == "ladder" and "increasing in n" in str(err.value)


def test_error_codes_are_distinct():
    cases = {
        "schema": minimal_raw(bogus={}),
        "ladder": minimal_raw(ladder={"rungs": [[4, 10], [8, 10]]}),
        "horizon": minimal_raw(time={"horizon": 0.0}),
        "initial": minimal_raw(initial={"form": "uniform", "lower": [1.0], "upper": [2.0], "height": 0.0}),
        "bounds": minimal_raw(bounds={"individual": 0.1}),
    }
    codes = set()
    for code, raw in cases.items():
        with pytest.raises(ConfigError) as err:
            parse_config(raw)
        assert err.value.code == code
        codes.add(err.value.exit_status)
    assert len(codes) == len(cases)


def test_missing_file_is_reported():
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent/scenario.toml")


def test_hash_changes_with_content():
    a = parse_config(minimal_raw())
    b = parse_config(minimal_raw(rates={"birth": 0.6, "death": 0.5}))
    assert a.config_hash != b.config_hash
    assert a.config_hash == parse_config(minimal_raw()).config_hash


# -- initial populations -------------------------------------------------


def test_point_like_density_gives_one_composition():
    x0 = make_initial({"form": "uniform", "lower": [2.02], "upper": [2.04], "height": 50.0}, 1)
    pop = sample_initial_population(x0, 10, 100, 0)
    assert list(pop.as_dict()) == [(20,)]
    assert totals(pop)[0] == int(np.ceil(100 * x0.mass() - 1e-9))


def test_group_count_contract():
    x0 = make_initial({"form": "uniform", "lower": [1.0], "upper": [2.0], "height": 2.5}, 1)
    assert x0.mass() == pytest.approx(2.5)
    assert totals(sample_initial_population(x0, 10, 100, 1))[0] == 250


def test_no_zero_compositions_are_drawn():
    x0 = make_initial({"form": "uniform", "lower": [0.0, 0.0], "upper": [0.3, 0.3], "height": 1.0}, 2)
    pop = sample_initial_population(x0, 5, 500, 3)
    assert all(any(c) for c in pop.as_dict())


def test_degenerate_initial_density_is_refused():
    x0 = make_initial({"form": "uniform", "lower": [0.0], "upper": [0.01], "height": 1.0}, 1)
    with pytest.raises(ConfigError):
        sample_initial_population(x0, 1, 10, 0)


def test_sampled_population_is_close_to_the_density():
    x0 = make_initial({"form": "uniform", "lower": [1.0], "upper": [2.0], "height": 1.0}, 1)
    grid = Grid(1, 4.0, 4000)
    target = DensityGrid(grid, grid.evaluate(x0))
    bank = TestFunctionBank(1, 512, 0)
    vals = [rho_w(empirical_measure(sample_initial_population(x0, 100, 1000, s), ScalingParams(100, 1000)),
                  target, bank).value for s in range(20)]
    assert np.median(vals) <= 0.05
