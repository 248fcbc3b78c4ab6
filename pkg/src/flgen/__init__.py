"""Federated learning simulation with generated-data supplementation."""

__version__ = "0.1.0"

from flgen.config import ConfigError, ExperimentConfig, build_config, parse_config
from flgen.evaluation import RoundRecord
from flgen.orchestrator import (
    ExperimentResult,
    ExperimentState,
    prepare_experiment,
    run_experiment,
    run_round,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "ExperimentState",
    "RoundRecord",
    "__version__",
    "build_config",
    "parse_config",
    "prepare_experiment",
    "run_experiment",
    "run_round",
]
