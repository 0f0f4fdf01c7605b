"""Group-structured population dynamics: exact simulation and large-population limits."""

__version__ = "0.1.0"

from .config import ConfigError, ScenarioConfig, load_config, shipped_config  # noqa: E402
from .harness import run_convergence_study, run_diagnostics  # noqa: E402
from .metrics import GBank, TestFunctionBank, pair, rho_w  # noqa: E402
from .model import Population, RateSpec, make_law, make_rate, totals  # noqa: E402
from .pde import DensityGrid, Grid, LimitCoefficients, solve  # noqa: E402
from .scaling import ScalingParams, empirical_measure  # noqa: E402
from .ssa import Scenario, Simulator, simulate  # noqa: E402

__all__ = [
    "ConfigError", "ScenarioConfig", "load_config", "shipped_config",
    "run_convergence_study", "run_diagnostics",
    "GBank", "TestFunctionBank", "pair", "rho_w",
    "Population", "RateSpec", "make_law", "make_rate", "totals",
    "DensityGrid", "Grid", "LimitCoefficients", "solve",
    "ScalingParams", "empirical_measure",
    "Scenario", "Simulator", "simulate",
]
