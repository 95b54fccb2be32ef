"""Network graph, losses, metrics and the two-stage cascade."""

from .base import SegmentationModel
from .cascade import (
    CascadeModel,
    load_model,
    make_stage2_inputs,
    predict_cascade,
    save_model,
    train_cascade,
)
from .layers import LayerSpec
from .losses import bce_loss, combined_loss, soft_dice
from .metrics import (
    Confusion,
    MetricsReport,
    binarize,
    confusion,
    evaluate_dataset,
    hard_dice,
    mean_iou,
)
from .network import (
    NetworkConfig,
    NetworkGraph,
    backward,
    build_network,
    decode_block_forward,
    forward,
    init_parameters,
    res_block_forward,
)
from .params import ParameterStore

__all__ = [
    "SegmentationModel",
    "CascadeModel",
    "Confusion",
    "LayerSpec",
    "MetricsReport",
    "NetworkConfig",
    "NetworkGraph",
    "ParameterStore",
    "backward",
    "bce_loss",
    "binarize",
    "build_network",
    "combined_loss",
    "confusion",
    "decode_block_forward",
    "evaluate_dataset",
    "forward",
    "hard_dice",
    "init_parameters",
    "load_model",
    "make_stage2_inputs",
    "mean_iou",
    "predict_cascade",
    "res_block_forward",
    "save_model",
    "soft_dice",
    "train_cascade",
]
