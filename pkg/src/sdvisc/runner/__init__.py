"""Scenario loading, the co-simulation loop, metrics and the CLI."""
from .config import (
    ConfigError,
    ParseError,
    Scenario,
    ValidationError,
    load_scenario,
    load_scenario_file,
    shipped_scenarios,
)
from .metrics import RunMetrics, SeriesTooShort, compute_metrics, parse_csv
from .sim import CoSim, RunResult, run

__all__ = [
    "ConfigError",
    "ParseError",
    "ValidationError",
    "Scenario",
    "load_scenario",
    "load_scenario_file",
    "shipped_scenarios",
    "RunMetrics",
    "SeriesTooShort",
    "compute_metrics",
    "parse_csv",
    "CoSim",
    "RunResult",
    "run",
]
