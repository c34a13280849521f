"""Benchmark harness: configuration, macro-replications, metrics and result files."""

from .config import ExperimentConfig, load_config, parse_config
from .harness import (
    MetricsRow,
    RunRecord,
    aggregate,
    derive_seed,
    emit_outputs,
    random_search,
    run_experiment,
)

__all__ = [
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "MetricsRow",
    "RunRecord",
    "aggregate",
    "derive_seed",
    "emit_outputs",
    "random_search",
    "run_experiment",
]
