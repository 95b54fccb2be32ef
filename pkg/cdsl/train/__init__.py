"""Optimizer, training loop, checkpoints and gradient checks."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, check_component, grad_check
from .optimizer import SGDMomentum, sgd_momentum_step
from .trainer import TrainConfig, TrainHistory, train

__all__ = [
    "GradCheckResult",
    "SGDMomentum",
    "TrainConfig",
    "TrainHistory",
    "check_component",
    "grad_check",
    "load_checkpoint",
    "save_checkpoint",
    "sgd_momentum_step",
    "train",
]
