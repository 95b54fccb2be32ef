"""Two-stage cascade: stage 2 sees the image concatenated with stage 1's probability map."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Sequence, Tuple, Union

import numpy as np

from cdsl.data.dataset import ImageSample, stack_batch
from cdsl.errors import CheckpointError, ShapeError

from .network import NetworkConfig, NetworkGraph, build_network, forward
from .params import ParameterStore

if TYPE_CHECKING:
    from cdsl.train.trainer import TrainConfig, TrainHistory

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "cdsl-manifest"
MANIFEST_VERSION = 1
MAP_BATCH = 8


def stage2_config(config: NetworkConfig) -> NetworkConfig:
    """Same architecture with one extra input channel for the stage-1 map."""
    return dataclasses.replace(config, in_channels=config.in_channels + 1)


def _predict(graph: NetworkGraph, images: np.ndarray) -> np.ndarray:
    outputs = [
        forward(graph, images[start : start + MAP_BATCH], "eval")
        for start in range(0, len(images), MAP_BATCH)
    ]
    return np.concatenate(outputs, axis=0)


@dataclass(eq=False)
class CascadeModel:
    """Frozen stage 1 feeding stage 2; both eval-only after training."""

    stage1: NetworkGraph
    stage2: NetworkGraph
    histories: Dict[str, TrainHistory] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.stage2.in_channels != self.stage1.in_channels + 1:
            raise ShapeError(
                f"Stage 2 takes {self.stage2.in_channels} channels, expected "
                f"{self.stage1.in_channels + 1}"
            )
        if self.stage1.input_size != self.stage2.input_size:
            raise ShapeError(
                f"Stage input sizes differ: {self.stage1.input_size} vs {self.stage2.input_size}"
            )

    @property
    def input_size(self) -> Tuple[int, int]:
        return self.stage1.input_size

    @property
    def in_channels(self) -> int:
        return self.stage1.in_channels

    def predict_stages(self, batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(stage-1 map, stage-2 map) for an (n, C, H, W) batch, eval mode."""
        stage1_map = _predict(self.stage1, batch)
        stage2_input = np.concatenate([batch.astype(stage1_map.dtype), stage1_map], axis=1)
        return stage1_map, _predict(self.stage2, stage2_input)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return self.predict_stages(batch)[1]

    def to_dict(self) -> Dict[str, Any]:
        return {"stage1": self.stage1.to_dict(), "stage2": self.stage2.to_dict()}

    def save(self, directory: Union[str, Path]) -> Path:
        """Write both checkpoints and the manifest; returns the manifest path."""
        return save_model(self, directory)


def predict_cascade(model: CascadeModel, image: np.ndarray) -> np.ndarray:
    """Stage-2 probability map (1, H, W) for one (H, W) or (C, H, W) image.

    Raises:
        ShapeError: If the image does not match the cascade's input.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    expected = (model.in_channels,) + model.input_size
    if image.shape != expected:
        raise ShapeError(f"Image shape {image.shape} does not match cascade input {expected}")
    return model.predict(image[None])[0]


def make_stage2_inputs(
    samples: Sequence[ImageSample], stage1: NetworkGraph
) -> List[ImageSample]:
    """Append stage 1's continuous probability map to every sample as an extra channel.

    Raises:
        ShapeError: If the samples do not match stage 1's input.
    """
    if not samples:
        return []
    images, _ = stack_batch(samples)
    if images.shape[1:] != (stage1.in_channels,) + stage1.input_size:
        raise ShapeError(
            f"Samples of shape {images.shape[1:]} do not fit stage 1 "
            f"({stage1.in_channels}, {stage1.input_size[0]}, {stage1.input_size[1]})"
        )
    maps = _predict(stage1, images)
    return [
        ImageSample(
            id=sample.id,
            image=np.concatenate([sample.as_channels(), prob_map.astype(np.float32)], axis=0),
            mask=sample.mask,
            direction=sample.direction,
            tumor_type=sample.tumor_type,
            metadata=dict(sample.metadata),
        )
        for sample, prob_map in zip(samples, maps)
    ]


def train_cascade(
    train_samples: Sequence[ImageSample],
    val_samples: Sequence[ImageSample],
    net_config: NetworkConfig,
    train_config: TrainConfig,
) -> CascadeModel:
    """Train stage 1 to completion, freeze it, then train stage 2 on image plus map.

    Stage 2 uses the same architecture and ``train_config``; its scale inputs
    resize both channels. Stage 1 is initialised from ``train_config.seed`` and
    stage 2 from ``train_config.seed + 1``.

    Returns:
        CascadeModel whose ``histories`` holds both training records.
    """
    from cdsl.train.trainer import train

    if net_config.in_channels != train_samples[0].channels:
        raise ShapeError(
            f"Stage 1 expects {net_config.in_channels} channels, samples have "
            f"{train_samples[0].channels}"
        )
    logger.info("Training cascade stage 1")
    stage1 = build_network(net_config, seed=train_config.seed)
    _, history1 = train(stage1, train_samples, val_samples, train_config)

    logger.info("Generating stage-1 maps for %d samples", len(train_samples) + len(val_samples))
    train2 = make_stage2_inputs(train_samples, stage1)
    val2 = make_stage2_inputs(val_samples, stage1)

    logger.info("Training cascade stage 2")
    stage2 = build_network(stage2_config(net_config), seed=train_config.seed + 1)
    _, history2 = train(stage2, train2, val2, train_config)
    return CascadeModel(stage1, stage2, histories={"stage1": history1, "stage2": history2})


def save_model(model: Union[NetworkGraph, CascadeModel], directory: Union[str, Path]) -> Path:
    """Write checkpoint(s) plus ``manifest.json`` into ``directory``.

    The manifest is ``{"stage1": ..., "stage2": ..., "net_config": ...}`` with
    paths relative to the manifest; a single network omits ``stage2``.
    """
    from cdsl.train.checkpoint import save_checkpoint

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stage1 = model.stage1 if isinstance(model, CascadeModel) else model
    if stage1.config is None:
        raise CheckpointError("Only networks built from a NetworkConfig can be saved")

    manifest: Dict[str, Any] = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "stage1": "stage1.ckpt",
        "net_config": stage1.config.to_dict(),
    }
    save_checkpoint(stage1.parameters, directory / "stage1.ckpt")
    if isinstance(model, CascadeModel):
        manifest["stage2"] = "stage2.ckpt"
        save_checkpoint(model.stage2.parameters, directory / "stage2.ckpt")

    manifest_path = directory / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return manifest_path


def _restore(config: NetworkConfig, store: ParameterStore, source: Path) -> NetworkGraph:
    graph = build_network(config)
    expected = {name: array.shape for name, array in graph.parameters.items()}
    found = {name: array.shape for name, array in store.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        wrong = sorted(n for n in set(expected) & set(found) if expected[n] != found[n])
        raise CheckpointError(
            f"{source} does not match the network config "
            f"(missing={missing[:5]}, unexpected={extra[:5]}, wrong shape={wrong[:5]})"
        )
    graph.parameters = ParameterStore({name: store[name] for name in expected})
    return graph


def load_model(manifest_path: Union[str, Path]) -> Union[NetworkGraph, CascadeModel]:
    """Load a single network or a cascade from its manifest.

    Raises:
        FileNotFoundError: If the manifest or a checkpoint is missing.
        CheckpointError: If the manifest is malformed or a checkpoint does not
            fit the configured architecture.
    """
    from cdsl.train.checkpoint import load_checkpoint

    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"Manifest not found: {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        config = NetworkConfig.from_dict(manifest["net_config"])
        stage1_file = manifest_path.parent / manifest["stage1"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Invalid manifest {manifest_path}: {e}") from e

    stage1 = _restore(config, load_checkpoint(stage1_file), stage1_file)
    if "stage2" not in manifest:
        return stage1
    stage2_file = manifest_path.parent / manifest["stage2"]
    stage2 = _restore(stage2_config(config), load_checkpoint(stage2_file), stage2_file)
    return CascadeModel(stage1, stage2)
