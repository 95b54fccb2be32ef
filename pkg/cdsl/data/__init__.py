"""Dataset ingestion, resampling, fold planning and synthetic data."""

from .dataset import (
    ImageSample,
    dataset_summary,
    load_dataset,
    read_image,
    save_dataset,
    stack_batch,
)
from .folds import FoldPlan, make_folds, split_train_val
from .resize import resize_bilinear, resize_tensor
from .synth import SynthSpec, synth_dataset

__all__ = [
    "ImageSample",
    "FoldPlan",
    "SynthSpec",
    "dataset_summary",
    "load_dataset",
    "make_folds",
    "read_image",
    "resize_bilinear",
    "resize_tensor",
    "save_dataset",
    "split_train_val",
    "stack_batch",
    "synth_dataset",
]
