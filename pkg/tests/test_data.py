"""Dataset layout, bilinear resampling, fold planning and synthetic data."""

from __future__ import annotations

import math
from pathlib import Path
from typing import List

import numpy as np
import pytest
from PIL import Image

from cdsl.data.dataset import (
    ImageSample,
    dataset_summary,
    load_dataset,
    read_image,
    save_dataset,
    stack_batch,
)
from cdsl.data.folds import FoldPlan, make_folds, split_train_val
from cdsl.data.resize import interpolation_matrix, resize_bilinear, resize_tensor_backward
from cdsl.data.synth import SynthSpec, synth_dataset
from cdsl.errors import ConfigError, DataError, ShapeError


def _write_pair(root: Path, sample_id: str, image: np.ndarray, mask: np.ndarray) -> None:
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.astype(np.uint8)).save(root / "images" / f"{sample_id}.png")
    Image.fromarray(mask.astype(np.uint8)).save(root / "masks" / f"{sample_id}.png")


def _reference_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Direct per-pixel half-pixel bilinear interpolation."""
    in_h, in_w = image.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1)
            x = min(max((j + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            wy, wx = y - y0, x - x0
            out[i, j] = (
                (1 - wy) * (1 - wx) * image[y0, x0]
                + (1 - wy) * wx * image[y0, x1]
                + wy * (1 - wx) * image[y1, x0]
                + wy * wx * image[y1, x1]
            )
    return out


class TestLoadDataset:
    def test_matched_pairs_load_in_id_order(self, tmp_path: Path) -> None:
        for sample_id in ("c", "a", "b"):
            _write_pair(tmp_path, sample_id, np.zeros((32, 32)), np.zeros((32, 32)))
        samples = load_dataset(tmp_path)
        assert [s.id for s in samples] == ["a", "b", "c"]

    def test_pixel_normalisation_and_mask_threshold(self, tmp_path: Path) -> None:
        image = np.zeros((32, 32))
        image[0, 0] = 255
        mask = np.zeros((32, 32))
        mask[0, 0] = 200
        mask[0, 1] = 127
        _write_pair(tmp_path, "x", image, mask)
        (sample,) = load_dataset(tmp_path, max_workers=1)
        assert sample.image[0, 0] == 1.0
        assert sample.mask[0, 0] == 1
        assert sample.mask[0, 1] == 0

    def test_missing_mask_is_rejected(self, tmp_path: Path) -> None:
        _write_pair(tmp_path, "a", np.zeros((32, 32)), np.zeros((32, 32)))
        Image.fromarray(np.zeros((32, 32), dtype=np.uint8)).save(tmp_path / "images" / "b.png")
        with pytest.raises(DataError, match="Missing mask for image 'b'"):
            load_dataset(tmp_path)

    def test_size_not_divisible_by_32_is_rejected(self, tmp_path: Path) -> None:
        _write_pair(tmp_path, "a", np.zeros((40, 32)), np.zeros((40, 32)))
        with pytest.raises(DataError, match="not divisible by 32"):
            load_dataset(tmp_path)

    def test_image_mask_size_mismatch_is_rejected(self, tmp_path: Path) -> None:
        _write_pair(tmp_path, "a", np.zeros((32, 32)), np.zeros((64, 32)))
        with pytest.raises(DataError, match="does not match"):
            load_dataset(tmp_path)

    def test_rgb_png_is_rejected(self, tmp_path: Path) -> None:
        _write_pair(tmp_path, "a", np.zeros((32, 32)), np.zeros((32, 32)))
        Image.new("RGB", (32, 32)).save(tmp_path / "images" / "a.png")
        with pytest.raises(DataError, match="mode 'RGB'"):
            load_dataset(tmp_path)

    def test_missing_directory(self, tmp_path: Path) -> None:
        with pytest.raises(FileNotFoundError, match="Missing dataset directory"):
            load_dataset(tmp_path)

    def test_save_then_load_keeps_masks_and_metadata(self, tmp_path: Path) -> None:
        samples = synth_dataset(4, 32, seed=1)
        load_root = save_dataset(samples, tmp_path / "ds")
        loaded = load_dataset(load_root)
        for original, restored in zip(samples, loaded):
            assert np.array_equal(original.mask, restored.mask)
            assert np.abs(original.image - restored.image).max() <= 0.5 / 255 + 1e-7
            assert restored.direction == original.direction
            assert restored.tumor_type == original.tumor_type


class TestImageSample:
    def test_values_outside_unit_range_are_rejected(self) -> None:
        with pytest.raises(DataError, match=r"\[0, 1\]"):
            ImageSample("bad", np.full((32, 32), 1.5), np.zeros((32, 32)))

    def test_non_binary_mask_is_rejected(self) -> None:
        with pytest.raises(DataError, match="exactly 0 or 1"):
            ImageSample("bad", np.zeros((32, 32)), np.full((32, 32), 2))

    def test_arrays_are_read_only(self) -> None:
        sample = ImageSample("a", np.zeros((32, 32)), np.zeros((32, 32)))
        with pytest.raises(ValueError):
            sample.image[0, 0] = 1.0

    def test_stack_batch_shapes(self) -> None:
        batch_samples = synth_dataset(3, 32, seed=0)
        images, masks = stack_batch(batch_samples)
        assert images.shape == (3, 1, 32, 32)
        assert masks.shape == (3, 1, 32, 32)
        assert images.dtype == np.float32

    def test_dataset_summary_counts(self) -> None:
        summary = dataset_summary(synth_dataset(6, 32, seed=2))
        assert summary["total"] == 6
        assert sum(summary["by_direction"].values()) == 6
        assert sum(summary["by_tumor_type"].values()) == 6


class TestReadImage:
    def test_reads_unit_range(self, tmp_path: Path) -> None:
        pixels = np.full((32, 64), 255, dtype=np.uint8)
        Image.fromarray(pixels).save(tmp_path / "img.png")
        image = read_image(tmp_path / "img.png")
        assert image.shape == (32, 64)
        assert image.max() == 1.0

    def test_size_violation_names_divisor(self, tmp_path: Path) -> None:
        Image.fromarray(np.zeros((33, 32), dtype=np.uint8)).save(tmp_path / "img.png")
        with pytest.raises(DataError, match="divisible by 32"):
            read_image(tmp_path / "img.png")


class TestResize:
    @pytest.mark.parametrize("factor", [0.5, 0.25, 0.125])
    def test_constant_image_stays_constant(self, factor: float) -> None:
        out = resize_bilinear(np.full((64, 64), 0.37), factor)
        assert np.allclose(out, 0.37, atol=1e-12)

    def test_output_shape(self) -> None:
        assert resize_bilinear(np.zeros((512, 512)), 0.5).shape == (256, 256)

    def test_ramp_matches_per_pixel_reference(self) -> None:
        ramp = np.arange(16, dtype=np.float64).reshape(4, 4)
        out = resize_bilinear(ramp, 0.5)
        assert np.allclose(out, _reference_bilinear(ramp, 2, 2), atol=1e-12)

    def test_random_image_matches_reference(self) -> None:
        image = np.random.default_rng(0).random((16, 32))
        out = resize_bilinear(image, 0.25)
        assert np.allclose(out, _reference_bilinear(image, 4, 8), atol=1e-12)

    def test_values_stay_within_input_range(self) -> None:
        image = np.random.default_rng(1).random((64, 64))
        out = resize_bilinear(image, 0.125)
        assert image.min() <= out.min() and out.max() <= image.max()

    def test_fractional_target_is_rejected(self) -> None:
        with pytest.raises(ShapeError, match="not a positive integer"):
            resize_bilinear(np.zeros((6, 6)), 0.25)

    def test_unsupported_factor_is_rejected(self) -> None:
        with pytest.raises(ShapeError, match="Unsupported scale factor"):
            resize_bilinear(np.zeros((8, 8)), 0.75)

    def test_interpolation_rows_sum_to_one(self) -> None:
        assert np.allclose(interpolation_matrix(32, 4).sum(axis=1), 1.0)

    def test_backward_is_adjoint(self) -> None:
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 16, 16))
        g = rng.standard_normal((1, 2, 8, 8))
        forward_value = np.sum(resize_bilinear(x[0, 0], 0.5) * g[0, 0])
        adjoint_value = np.sum(x[0, 0] * resize_tensor_backward(g, 16, 16)[0, 0])
        assert forward_value == pytest.approx(adjoint_value, rel=1e-12)


class TestFolds:
    def test_ten_ids_five_folds(self) -> None:
        plan = make_folds([f"id{i}" for i in range(10)], 5, seed=0)
        assert plan.fold_sizes() == (2, 2, 2, 2, 2)

    def test_full_dataset_fold_sizes(self) -> None:
        plan = make_folds([str(i) for i in range(3064)], 5, seed=0)
        assert sorted(plan.fold_sizes(), reverse=True) == [613, 613, 613, 613, 612]

    def test_same_seed_same_assignment(self) -> None:
        ids = [f"s{i}" for i in range(37)]
        assert make_folds(ids, 4, seed=9).assignment == make_folds(ids, 4, seed=9).assignment

    @pytest.mark.parametrize("k,n,seed", [(2, 5, 0), (3, 10, 1), (5, 23, 2), (7, 7, 3)])
    def test_partition_invariants(self, k: int, n: int, seed: int) -> None:
        ids = [f"s{i}" for i in range(n)]
        plan = make_folds(ids, k, seed)
        tests: List[str] = []
        for fold in range(k):
            test_ids = plan.test_ids(fold)
            assert set(test_ids).isdisjoint(plan.train_ids(fold))
            assert sorted(test_ids + plan.train_ids(fold)) == sorted(ids)
            tests.extend(test_ids)
        assert sorted(tests) == sorted(ids)
        assert max(plan.fold_sizes()) - min(plan.fold_sizes()) <= 1

    def test_invalid_fold_requests(self) -> None:
        with pytest.raises(ConfigError):
            make_folds(["a", "b"], 1, seed=0)
        with pytest.raises(ConfigError):
            make_folds(["a"], 2, seed=0)
        with pytest.raises(DataError, match="Duplicate"):
            make_folds(["a", "a", "b"], 2, seed=0)

    def test_plan_dict_roundtrip(self) -> None:
        plan = make_folds([f"s{i}" for i in range(9)], 3, seed=4)
        assert FoldPlan.from_dict(plan.to_dict()) == plan


class TestSplitTrainVal:
    def test_ten_ids(self) -> None:
        train, val = split_train_val([f"s{i}" for i in range(10)], 0.2, seed=0)
        assert (len(train), len(val)) == (8, 2)

    def test_partition(self) -> None:
        ids = [f"s{i}" for i in range(31)]
        train, val = split_train_val(ids, 0.2, seed=5)
        assert set(train) | set(val) == set(ids)
        assert not set(train) & set(val)

    def test_cv_training_split_size(self) -> None:
        _, val = split_train_val([str(i) for i in range(2451)], 0.2, seed=0)
        assert len(val) == 491

    def test_invalid_fraction(self) -> None:
        with pytest.raises(ConfigError):
            split_train_val(["a", "b"], 1.0, seed=0)

    @pytest.mark.parametrize(
        "ids, fraction", [(["a"], 0.2), (["a", "b"], 0.6), (["a", "b", "c"], 0.9)]
    )
    def test_no_training_ids_left(self, ids: List[str], fraction: float) -> None:
        with pytest.raises(DataError, match="leaves no training ids"):
            split_train_val(ids, fraction, seed=0)

    def test_empty_or_duplicate_ids(self) -> None:
        with pytest.raises(DataError, match="empty id list"):
            split_train_val([], 0.2, seed=0)
        with pytest.raises(DataError, match="Duplicate sample ids"):
            split_train_val(["a", "a", "b"], 0.2, seed=0)


class TestSynth:
    def test_contract(self) -> None:
        generated = synth_dataset(8, 64, seed=7)
        assert len(generated) == 8
        for sample in generated:
            assert sample.size == (64, 64)
            assert sample.mask.sum() > 0

    def test_deterministic(self) -> None:
        first = synth_dataset(4, 64, seed=7)
        second = synth_dataset(4, 64, seed=7)
        for a, b in zip(first, second):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.mask, b.mask)

    def test_foreground_fraction_bounds(self) -> None:
        for seed in range(5):
            for sample in synth_dataset(20, 64, seed=seed):
                assert 0.02 <= sample.foreground_fraction() <= 0.30

    def test_invalid_spec(self) -> None:
        with pytest.raises(ConfigError):
            SynthSpec(n=4, size=48)
        with pytest.raises(ConfigError):
            SynthSpec(n=0, size=64)
