"""Two-stage cascade: stage-2 inputs, frozen stage 1 and the model manifest."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, List

import numpy as np
import pytest

from cdsl.train import trainer as trainer_module
from cdsl.core.cascade import (
    CascadeModel,
    load_model,
    make_stage2_inputs,
    predict_cascade,
    save_model,
    stage2_config,
    train_cascade,
)
from cdsl.core.network import NetworkConfig, NetworkGraph, build_network
from cdsl.data.dataset import ImageSample, stack_batch
from cdsl.errors import CheckpointError, ShapeError
from cdsl.train.trainer import TrainConfig


@pytest.fixture
def cascade(tiny_config: NetworkConfig) -> CascadeModel:
    return CascadeModel(
        build_network(tiny_config, seed=0), build_network(stage2_config(tiny_config), seed=1)
    )


class TestStage2Inputs:
    def test_stage2_takes_one_more_channel(self, tiny_config: NetworkConfig) -> None:
        config = stage2_config(tiny_config)
        assert config.in_channels == tiny_config.in_channels + 1
        assert config.scale_inputs == tiny_config.scale_inputs
        assert build_network(config).shape_trace()[0][1] == (1, 2, 64, 64)

    def test_appends_continuous_map(
        self, tiny_config: NetworkConfig, samples: List[ImageSample]
    ) -> None:
        stage1 = build_network(tiny_config, seed=3)
        augmented = make_stage2_inputs(samples[:3], stage1)
        images, _ = stack_batch(samples[:3])
        expected = stage1.predict(images)

        for original, sample, prob_map in zip(samples, augmented, expected):
            assert sample.image.shape == (2, 64, 64)
            assert np.array_equal(sample.image[0], original.image)
            assert np.allclose(sample.image[1], prob_map[0], atol=1e-6)
            assert np.array_equal(sample.mask, original.mask)
            assert sample.id == original.id
        assert len(np.unique(augmented[0].image[1])) > 2

    def test_empty(self, tiny_config: NetworkConfig) -> None:
        assert make_stage2_inputs([], build_network(tiny_config)) == []

    def test_wrong_size(self, tiny_config: NetworkConfig) -> None:
        from cdsl.data.synth import synth_dataset

        with pytest.raises(ShapeError, match="do not fit stage 1"):
            make_stage2_inputs(synth_dataset(1, 32, 0), build_network(tiny_config))


class TestCascadeModel:
    def test_channel_mismatch(self, tiny_config: NetworkConfig) -> None:
        with pytest.raises(ShapeError, match="Stage 2 takes 1 channels"):
            CascadeModel(build_network(tiny_config), build_network(tiny_config))

    def test_predict_matches_manual_chain(self, cascade: CascadeModel) -> None:
        batch = np.random.default_rng(0).random((2, 1, 64, 64)).astype(np.float32)
        stage1_map, stage2_map = cascade.predict_stages(batch)
        manual = cascade.stage2.predict(np.concatenate([batch, stage1_map], axis=1))
        assert np.array_equal(stage2_map, manual)
        assert np.array_equal(cascade.predict(batch), stage2_map)

    def test_predict_single_image(self, cascade: CascadeModel) -> None:
        image = np.random.default_rng(1).random((64, 64))
        out = predict_cascade(cascade, image)
        assert out.shape == (1, 64, 64)
        assert np.all((out >= 0) & (out <= 1))
        with pytest.raises(ShapeError, match="does not match cascade input"):
            predict_cascade(cascade, np.zeros((32, 32)))


class TestManifest:
    def test_cascade_roundtrip(self, tmp_path: Path, cascade: CascadeModel) -> None:
        manifest = save_model(cascade, tmp_path / "model")
        data = json.loads(manifest.read_text())
        assert data["stage1"] == "stage1.ckpt" and data["stage2"] == "stage2.ckpt"
        assert data["net_config"]["scale_inputs"] == [0.5]

        restored = load_model(tmp_path / "model")
        assert isinstance(restored, CascadeModel)
        batch = np.random.default_rng(2).random((2, 1, 64, 64)).astype(np.float32)
        assert np.array_equal(restored.predict(batch), cascade.predict(batch))

    def test_single_network_manifest(self, tmp_path: Path, tiny_config: NetworkConfig) -> None:
        graph = build_network(tiny_config, seed=5)
        manifest = save_model(graph, tmp_path)
        assert "stage2" not in json.loads(manifest.read_text())
        restored = load_model(manifest)
        assert isinstance(restored, NetworkGraph)
        assert restored.parameters.equals(graph.parameters)

    def test_checkpoint_for_other_architecture(
        self, tmp_path: Path, tiny_config: NetworkConfig
    ) -> None:
        manifest = save_model(build_network(tiny_config), tmp_path)
        data = json.loads(manifest.read_text())
        data["net_config"]["head_channels"] = 8
        manifest.write_text(json.dumps(data))
        with pytest.raises(CheckpointError, match="does not match the network config"):
            load_model(manifest)

    def test_malformed_manifest(self, tmp_path: Path) -> None:
        (tmp_path / "manifest.json").write_text("{}")
        with pytest.raises(CheckpointError, match="Invalid manifest"):
            load_model(tmp_path)

    def test_missing_manifest(self, tmp_path: Path) -> None:
        with pytest.raises(FileNotFoundError):
            load_model(tmp_path)


def test_stage1_is_frozen_while_stage2_trains(
    monkeypatch: pytest.MonkeyPatch, tiny_config: NetworkConfig, samples: List[ImageSample]
) -> None:
    """Stage-1 parameters after its own training survive stage-2 training bit for bit."""
    real_train = trainer_module.train
    snapshots: List[Any] = []

    def spy(graph: NetworkGraph, *args: Any, **kwargs: Any) -> Any:
        result = real_train(graph, *args, **kwargs)
        snapshots.append(graph.parameters.copy())
        return result

    monkeypatch.setattr(trainer_module, "train", spy)
    model = train_cascade(samples[:6], samples[6:], tiny_config, TrainConfig(epochs=2, seed=4))

    assert len(snapshots) == 2
    assert model.stage1.parameters.equals(snapshots[0])
    assert model.stage2.in_channels == 2
    assert set(model.histories) == {"stage1", "stage2"}
    assert model.histories["stage2"].epochs_run == 2


def test_cascade_rejects_multichannel_stage1_samples(
    tiny_config: NetworkConfig, samples: List[ImageSample]
) -> None:
    augmented = make_stage2_inputs(samples[:4], build_network(tiny_config))
    with pytest.raises(ShapeError, match="Stage 1 expects 1 channels"):
        train_cascade(augmented, [], tiny_config, TrainConfig(epochs=1))


@pytest.mark.slow
def test_cascade_overfits_eight_samples(samples: List[ImageSample]) -> None:
    """Stage 2 reaches train Dice >= 0.95 on eight 64x64 synthetic samples."""
    config = NetworkConfig(
        base_channels=16,
        encoder_channels=(16, 32, 64, 128),
        head_channels=16,
        scale_inputs=(0.5,),
        input_size=(64, 64),
    )
    model = train_cascade(samples, samples, config, TrainConfig(epochs=300, seed=0))
    history = model.histories["stage2"]
    assert history.train_dice[history.selected_epoch - 1] >= 0.95
