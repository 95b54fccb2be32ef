"""Epoch loop: seeded shuffling, SGD with momentum, per-epoch validation and model selection."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from cdsl.core.losses import combined_loss, loss_and_grad
from cdsl.core.metrics import binarize, confusion, hard_dice
from cdsl.core.network import NetworkGraph, backward, forward
from cdsl.core.params import ParameterStore
from cdsl.data.dataset import ImageSample, stack_batch
from cdsl.errors import ConfigError, DataError, NumericalError

from .optimizer import SGDMomentum

logger = logging.getLogger(__name__)

SelectBestOn = Literal["last_epoch", "best_val_dice"]
EVAL_BATCH = 8


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings; defaults follow the reference protocol."""

    learning_rate: float = 0.001
    momentum: float = 0.9
    epochs: int = 300
    batch_size: int = 4
    seed: int = 0
    use_dice_loss: bool = True
    select_best_on: SelectBestOn = "best_val_dice"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2 (batch norm needs batch statistics), "
                f"got {self.batch_size}"
            )
        if self.select_best_on not in ("last_epoch", "best_val_dice"):
            raise ConfigError(f"Unknown select_best_on '{self.select_best_on}'")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> TrainConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainHistory:
    """Per-epoch record of one training run. ``selected_epoch`` is 1-based."""

    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_dice: List[float] = field(default_factory=list)
    train_dice: List[float] = field(default_factory=list)
    selected_epoch: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def record(
        self, train_loss: float, val_loss: float, val_dice: float, train_dice: float
    ) -> None:
        values = (train_loss, val_loss, val_dice, train_dice)
        if not all(np.isfinite(v) for v in values):
            raise NumericalError(f"Non-finite history values at epoch {self.epochs_run + 1}")
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.val_dice.append(val_dice)
        self.train_dice.append(train_dice)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> TrainHistory:
        return cls(**data)

    def save_to_file(self, file_path: Union[str, Path]) -> None:
        with open(file_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load_from_file(cls, file_path: Union[str, Path]) -> TrainHistory:
        with open(file_path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def predict_batches(
    graph: NetworkGraph, images: np.ndarray, batch_size: int = EVAL_BATCH
) -> np.ndarray:
    """Eval-mode predictions for an (n, C, H, W) array, computed in chunks."""
    outputs = [
        forward(graph, images[start : start + batch_size], "eval")
        for start in range(0, len(images), batch_size)
    ]
    return np.concatenate(outputs, axis=0)


def mean_hard_dice(probabilities: np.ndarray, masks: np.ndarray) -> float:
    """Mean per-image hard Dice of thresholded ``probabilities``."""
    preds = binarize(probabilities)
    scores = [hard_dice(confusion(p, m)) for p, m in zip(preds, masks)]
    return float(np.mean(scores))


def _evaluate(
    graph: NetworkGraph, images: np.ndarray, masks: np.ndarray, use_dice: bool
) -> Tuple[float, float]:
    probabilities = predict_batches(graph, images)
    return combined_loss(probabilities, masks, use_dice), mean_hard_dice(probabilities, masks)


def _batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    chunks = [order[start : start + batch_size] for start in range(0, len(order), batch_size)]
    return [chunk for chunk in chunks if len(chunk) >= 2]


def train(
    graph: NetworkGraph,
    train_samples: Sequence[ImageSample],
    val_samples: Sequence[ImageSample],
    config: TrainConfig,
    log_every: int = 1,
) -> Tuple[ParameterStore, TrainHistory]:
    """Train ``graph`` in place and return the selected parameters.

    Each epoch shuffles the training samples with a generator seeded from
    ``config.seed``, drops a trailing batch smaller than 2, runs
    forward/loss/backward/step per batch, then evaluates both splits in eval
    mode. With ``best_val_dice`` the parameters of the first epoch reaching the
    highest validation Dice are kept; ``graph.parameters`` is set to the
    returned store.

    Args:
        graph: Network to optimise.
        train_samples: Training samples.
        val_samples: Validation samples. When empty, the training samples are
            used and a warning is issued.
        config: Optimisation settings.
        log_every: Log an INFO line every this many epochs.

    Returns:
        Tuple of (selected parameters, history).

    Raises:
        DataError: If fewer than 2 training samples are given.
        NumericalError: If a loss or activation becomes non-finite, naming the
            epoch and batch.
    """
    if len(train_samples) < 2:
        raise DataError(f"Training needs at least 2 samples, got {len(train_samples)}")
    if not val_samples:
        warnings.warn("Empty validation split; validating on the training samples")
        val_samples = train_samples

    images, masks = stack_batch(train_samples)
    val_images, val_masks = stack_batch(val_samples)
    store = graph.parameters
    trainable = store.trainable_names()
    optimizer = SGDMomentum(config.learning_rate, config.momentum)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best: Optional[ParameterStore] = None
    best_dice = -np.inf

    for epoch in range(1, config.epochs + 1):
        losses: List[float] = []
        batches = _batches(rng.permutation(len(images)), config.batch_size)
        for index, batch_ids in enumerate(batches):
            x, y = images[batch_ids], masks[batch_ids]
            try:
                probabilities = forward(graph, x, "train")
                loss, upstream = loss_and_grad(probabilities, y, config.use_dice_loss)
                if not np.isfinite(loss):
                    raise NumericalError(f"loss is {loss}")
                grads = backward(graph, x, upstream)
            except NumericalError as e:
                raise NumericalError(f"Epoch {epoch}, batch {index + 1}: {e}") from e
            optimizer.step(store, {name: grads.params[name] for name in trainable})
            losses.append(loss)
        graph.clear_cache()

        val_loss, val_dice = _evaluate(graph, val_images, val_masks, config.use_dice_loss)
        train_dice = mean_hard_dice(predict_batches(graph, images), masks)
        history.record(float(np.mean(losses)), val_loss, val_dice, train_dice)

        if config.select_best_on == "best_val_dice" and val_dice > best_dice:
            best_dice = val_dice
            best = store.copy()
            history.selected_epoch = epoch
        if epoch % log_every == 0 or epoch == config.epochs:
            logger.info(
                "epoch %d/%d loss=%.5f val_loss=%.5f val_dice=%.4f train_dice=%.4f",
                epoch,
                config.epochs,
                history.train_loss[-1],
                val_loss,
                val_dice,
                train_dice,
            )

    if config.select_best_on == "last_epoch" or best is None:
        history.selected_epoch = config.epochs
        selected = store
    else:
        selected = best
    graph.parameters = selected
    logger.info(
        "Selected epoch %d (val_dice=%.4f)",
        history.selected_epoch,
        history.val_dice[history.selected_epoch - 1],
    )
    return selected, history
