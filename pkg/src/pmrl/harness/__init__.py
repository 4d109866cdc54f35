"""Experiment harness: configuration, training, gradient checks and suites."""

from .config import OBJECTIVES, RunConfig, config_from_dict, load_config
from .suites import SUITE_NAMES, run_suite
from .train import TrainResult, train

__all__ = [
    "OBJECTIVES",
    "SUITE_NAMES",
    "RunConfig",
    "TrainResult",
    "config_from_dict",
    "load_config",
    "run_suite",
    "train",
]
