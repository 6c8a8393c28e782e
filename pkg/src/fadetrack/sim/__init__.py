"""Scenario assembly, Monte Carlo engine, metrics and diagnostics."""

from .config import ConfigError, ScenarioConfig, load_scenario
from .diagnostics import (
    BoundConstants,
    InvalidBounds,
    covariance_bounds,
    default_bound_constants,
    empirical_bound_check,
    stability_margin,
)
from .engine import ExperimentFailed, MonteCarloResult, RunFailure, RunResult, build_world, run_monte_carlo, simulate_run
from .metrics import MetricsReport, energy_accounting, rmse_position, rmse_velocity

__all__ = [
    "BoundConstants",
    "ConfigError",
    "ExperimentFailed",
    "InvalidBounds",
    "MetricsReport",
    "MonteCarloResult",
    "RunFailure",
    "RunResult",
    "ScenarioConfig",
    "build_world",
    "covariance_bounds",
    "default_bound_constants",
    "empirical_bound_check",
    "energy_accounting",
    "load_scenario",
    "rmse_position",
    "rmse_velocity",
    "run_monte_carlo",
    "simulate_run",
    "stability_margin",
]
