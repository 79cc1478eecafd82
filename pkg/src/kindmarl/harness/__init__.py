"""Experiment orchestration: config, runs, reports, figures."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .report import ComparisonError, RunSummary, compare_methods, percentage_difference, read_summary
from .runner import run_experiment, run_seed

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "ComparisonError",
    "RunSummary",
    "compare_methods",
    "percentage_difference",
    "read_summary",
    "run_experiment",
    "run_seed",
]
