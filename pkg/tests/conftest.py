"""Shared fixtures: tiny architectures and synthetic samples that keep the suite fast."""

from __future__ import annotations

from typing import Any, Callable, Dict, List

import pytest

from cdsl.core.network import NetworkConfig
from cdsl.data.dataset import ImageSample
from cdsl.data.synth import synth_dataset

TINY_NETWORK: Dict[str, Any] = {
    "base_channels": 4,
    "encoder_channels": [4, 8, 12, 16],
    "head_channels": 4,
    "input_size": [64, 64],
}


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("CDSL_SEED", raising=False)


@pytest.fixture
def tiny_config() -> NetworkConfig:
    """Dual-scale network small enough to train on a laptop in seconds."""
    return NetworkConfig(**{**TINY_NETWORK, "scale_inputs": (0.5,)})


@pytest.fixture
def samples() -> List[ImageSample]:
    return synth_dataset(8, 64, seed=7)


@pytest.fixture
def experiment_data(tmp_path: Any) -> Callable[..., Dict[str, Any]]:
    """Factory for a small experiment config dictionary writing under ``tmp_path``."""

    def make(name: str = "tiny", **overrides: Any) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "name": name,
            "synth": {"n": 16, "size": 64, "seed": 3},
            "network": dict(TINY_NETWORK, scale_inputs=[0.5]),
            "train": {"epochs": 2, "batch_size": 4},
            "k_folds": 2,
            "seed": 11,
            "output_dir": str(tmp_path / name),
        }
        data.update(overrides)
        return data

    return make
