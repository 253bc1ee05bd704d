"""Desk-scale training harness."""

from .experiment import (
    ConfigError,
    ExperimentConfig,
    ModelSpec,
    Regime,
    RunReport,
    compare_regimes,
    rank_sweep,
    run_experiment,
    standard_benchmark,
)

__all__ = [
    "ConfigError", "ExperimentConfig", "ModelSpec", "Regime", "RunReport",
    "compare_regimes", "rank_sweep", "run_experiment", "standard_benchmark",
]
