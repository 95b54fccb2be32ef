"""Experiment configs, run orchestration and the command line."""

from .config import ExperimentConfig, derive_seed, list_presets, load_preset, resolve_config
from .runner import CVReport, FoldResult, run_cv, run_eval, run_predict, run_train

__all__ = [
    "CVReport",
    "ExperimentConfig",
    "FoldResult",
    "derive_seed",
    "list_presets",
    "load_preset",
    "resolve_config",
    "run_cv",
    "run_eval",
    "run_predict",
    "run_train",
]
