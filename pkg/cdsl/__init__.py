"""CDSL Net - cascaded dual-scale LinkNet for binary tumor segmentation."""

from .core import (
    CascadeModel,
    MetricsReport,
    NetworkConfig,
    NetworkGraph,
    build_network,
    evaluate_dataset,
    forward,
    load_model,
    train_cascade,
)
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CascadeModel",
    "MetricsReport",
    "NetworkConfig",
    "NetworkGraph",
    "TrainConfig",
    "build_network",
    "evaluate_dataset",
    "forward",
    "load_model",
    "train",
    "train_cascade",
]
