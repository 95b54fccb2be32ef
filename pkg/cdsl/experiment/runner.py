"""Run directories for train, eval, cross-validation and prediction."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from cdsl.core.cascade import CascadeModel, load_model, save_model, train_cascade
from cdsl.core.metrics import MetricsReport, binarize, evaluate_dataset
from cdsl.core.network import NetworkGraph, build_network
from cdsl.data.dataset import ImageSample, load_dataset, read_image
from cdsl.data.folds import FoldPlan, make_folds, split_train_val
from cdsl.data.synth import synth_dataset
from cdsl.errors import CDSLError, DataError, ShapeError
from cdsl.train.trainer import TrainConfig, TrainHistory, train
from cdsl.utils.template_renderer import render_report
from cdsl.utils.visualizer import TrainingVisualizer

from .config import FOLD_STREAM, SPLIT_STREAM, ExperimentConfig

logger = logging.getLogger(__name__)

Model = Union[NetworkGraph, CascadeModel]

CV_FORMAT = "cdsl-cv-report"


def _write_json(data: Dict[str, Any], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)


def load_samples(config: ExperimentConfig) -> List[ImageSample]:
    """Dataset named by ``config``: a directory on disk or the synthetic set.

    Raises:
        DataError: If the samples do not match ``network.input_size`` or the
            configured input channels.
    """
    if config.data_root is not None:
        samples = load_dataset(config.data_root, max_workers=config.threads)
    else:
        assert config.synth is not None
        samples = synth_dataset(config.synth.n, config.synth.size, config.synth.seed)
    if not samples:
        raise DataError(f"No samples found for experiment '{config.name}'")
    expected = tuple(config.network.input_size)
    for sample in samples:
        if sample.size != expected:
            raise DataError(
                f"Sample '{sample.id}' is {sample.size[0]}x{sample.size[1]}, the network "
                f"expects {expected[0]}x{expected[1]}"
            )
        if sample.channels != config.network.in_channels:
            raise DataError(
                f"Sample '{sample.id}' has {sample.channels} channels, the network expects "
                f"{config.network.in_channels}"
            )
    return samples


def _select(samples: Sequence[ImageSample], ids: Sequence[str]) -> List[ImageSample]:
    by_id = {sample.id: sample for sample in samples}
    return [by_id[sample_id] for sample_id in ids]


def fit_model(
    config: ExperimentConfig,
    train_samples: Sequence[ImageSample],
    val_samples: Sequence[ImageSample],
    train_config: TrainConfig,
) -> Tuple[Model, Dict[str, TrainHistory]]:
    """Train a single network or a cascade, as ``config.cascade`` says."""
    if config.cascade:
        cascade = train_cascade(train_samples, val_samples, config.network, train_config)
        return cascade, dict(cascade.histories)
    graph = build_network(config.network, seed=train_config.seed)
    _, history = train(graph, train_samples, val_samples, train_config)
    return graph, {"stage1": history}


def _write_histories(histories: Dict[str, TrainHistory], directory: Path) -> None:
    visualizer = TrainingVisualizer()
    if len(histories) == 1:
        history = next(iter(histories.values()))
        history.save_to_file(directory / "history.json")
        visualizer.save_html(visualizer.plot_history(history), directory / "history.html")
        return
    for stage, history in histories.items():
        history.save_to_file(directory / f"history_{stage}.json")
        visualizer.save_html(
            visualizer.plot_history(history, title=f"Training history ({stage})"),
            directory / f"history_{stage}.html",
        )


def _write_metrics(report: MetricsReport, directory: Path, stem: str, title: str) -> None:
    report.save_json(directory / f"{stem}.json")
    report.save_csv(directory / f"{stem}.csv")
    (directory / f"{stem}.md").write_text(report.markdown(title), encoding="utf-8")


def run_train(config: ExperimentConfig) -> Path:
    """Train on a seeded train/validation split of the whole dataset.

    Writes ``run.json``, the model manifest and checkpoint(s), the training
    histories (JSON and HTML), a network drawing and validation metrics into
    ``config.output_dir``.

    Returns:
        Path of the written manifest.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save_to_file(out / "run.json")

    samples = load_samples(config)
    train_ids, val_ids = split_train_val(
        [s.id for s in samples], config.val_fraction, config.seed_for(SPLIT_STREAM)
    )
    logger.info(
        "Training '%s' on %d samples, validating on %d", config.name, len(train_ids), len(val_ids)
    )
    val_samples = _select(samples, val_ids)
    model, histories = fit_model(
        config, _select(samples, train_ids), val_samples, config.derived_train_config()
    )

    manifest = save_model(model, out / "model")
    _write_histories(histories, out)
    graph = model.stage1 if isinstance(model, CascadeModel) else model
    visualizer = TrainingVisualizer()
    visualizer.save_html(visualizer.plot_network(graph), out / "network.html")
    report = evaluate_dataset(model, val_samples, config.threshold)
    _write_metrics(report, out, "metrics", f"{config.name}: validation")
    logger.info(
        "Validation dice=%.4f mean_iou=%.4f (%s)", report.mean_dice, report.mean_miou, manifest
    )
    return manifest


def run_eval(
    manifest: Union[str, Path], config: ExperimentConfig, stem: str = "eval"
) -> MetricsReport:
    """Score a saved model on the configured dataset and write JSON, CSV and Markdown."""
    model = load_model(manifest)
    samples = load_samples(config)
    report = evaluate_dataset(model, samples, config.threshold)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics(report, out, stem, f"{config.name}: evaluation")
    logger.info("Evaluated %d samples: dice=%.4f", len(samples), report.mean_dice)
    return report


@dataclass
class FoldResult:
    """Outcome of one cross-validation fold."""

    fold: int
    train_size: int
    val_size: int
    report: MetricsReport
    selected_epochs: Dict[str, int] = field(default_factory=dict)

    @property
    def test_size(self) -> int:
        return len(self.report.per_image)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fold": self.fold,
            "train_size": self.train_size,
            "val_size": self.val_size,
            "test_size": self.test_size,
            "mean_dice": self.report.mean_dice,
            "mean_miou": self.report.mean_miou,
            "selected_epochs": dict(self.selected_epochs),
            "report": self.report.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> FoldResult:
        return cls(
            fold=data["fold"],
            train_size=data["train_size"],
            val_size=data["val_size"],
            report=MetricsReport.from_dict(data["report"]),
            selected_epochs=dict(data.get("selected_epochs", {})),
        )


@dataclass
class CVReport:
    """Per-fold reports and their mean; the fold mean is the headline figure."""

    per_fold: List[FoldResult]
    config_hash: str
    name: str = "experiment"
    reference: Dict[str, float] = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([fold.report.mean_dice for fold in self.per_fold]))

    @property
    def mean_miou(self) -> float:
        return float(np.mean([fold.report.mean_miou for fold in self.per_fold]))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": CV_FORMAT,
            "name": self.name,
            "config_hash": self.config_hash,
            "k": len(self.per_fold),
            "mean_dice": self.mean_dice,
            "mean_miou": self.mean_miou,
            "reference": dict(self.reference),
            "per_fold": [fold.to_dict() for fold in self.per_fold],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> CVReport:
        return cls(
            per_fold=[FoldResult.from_dict(fold) for fold in data["per_fold"]],
            config_hash=data["config_hash"],
            name=data.get("name", "experiment"),
            reference=dict(data.get("reference", {})),
        )

    def save_json(self, path: Union[str, Path]) -> None:
        _write_json(self.to_dict(), Path(path))

    @classmethod
    def load_json(cls, path: Union[str, Path]) -> CVReport:
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def markdown(self) -> str:
        return render_report("cv_report", report=self.to_dict())


def run_fold(
    config: ExperimentConfig, plan: FoldPlan, fold: int, samples: Sequence[ImageSample]
) -> FoldResult:
    """Train on every fold except ``fold`` and score the model on ``fold``."""
    train_ids, val_ids = split_train_val(
        plan.train_ids(fold), config.val_fraction, config.seed_for(SPLIT_STREAM, fold)
    )
    logger.info(
        "Fold %d/%d: train=%d val=%d test=%d",
        fold + 1,
        plan.k,
        len(train_ids),
        len(val_ids),
        len(plan.test_ids(fold)),
    )
    model, histories = fit_model(
        config,
        _select(samples, train_ids),
        _select(samples, val_ids),
        config.derived_train_config(fold),
    )
    report = evaluate_dataset(model, _select(samples, plan.test_ids(fold)), config.threshold)
    logger.info("Fold %d/%d done: dice=%.4f", fold + 1, plan.k, report.mean_dice)
    return FoldResult(
        fold=fold,
        train_size=len(train_ids),
        val_size=len(val_ids),
        report=report,
        selected_epochs={stage: h.selected_epoch for stage, h in histories.items()},
    )


def _fold_job(
    config_data: Dict[str, Any], plan_data: Dict[str, Any], fold: int, samples: List[ImageSample]
) -> FoldResult:
    config = ExperimentConfig.from_dict(config_data)
    return run_fold(config, FoldPlan.from_dict(plan_data), fold, samples)


def _with_fold(error: Exception, fold: int) -> Exception:
    message = f"Fold {fold}: {error}"
    try:
        return type(error)(message)
    except TypeError:
        return CDSLError(message)


def run_cv(config: ExperimentConfig, parallel_folds: bool = False) -> CVReport:
    """k-fold cross-validation with deterministically derived seeds.

    The fold plan, each fold's validation split and each fold's training seed
    derive from ``config.seed``; results are assembled in fold order, so
    sequential and parallel runs write identical reports.

    Args:
        config: Experiment configuration.
        parallel_folds: Run folds in worker processes (at most ``config.threads``).

    Returns:
        The cross-validation report, also written as ``cv_report.json``,
        ``cv_report.md`` and ``fold_<f>_metrics.csv`` with ``run.json`` and
        ``folds.json``.

    Raises:
        CDSLError: Any fold failure, re-raised with the fold id prefixed.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save_to_file(out / "run.json")

    samples = load_samples(config)
    plan = make_folds(
        [s.id for s in samples], config.k_folds, config.seed_for(FOLD_STREAM), config.val_fraction
    )
    _write_json(plan.to_dict(), out / "folds.json")
    logger.info("Cross-validating '%s': k=%d, %d samples", config.name, plan.k, len(samples))

    results: List[FoldResult] = []
    folds = range(plan.k)
    if parallel_folds:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            futures = [
                pool.submit(_fold_job, config.to_dict(), plan.to_dict(), fold, list(samples))
                for fold in folds
            ]
            for fold, future in zip(folds, futures):
                try:
                    results.append(future.result())
                except Exception as e:
                    raise _with_fold(e, fold) from e
    else:
        for fold in folds:
            try:
                results.append(run_fold(config, plan, fold, samples))
            except Exception as e:
                raise _with_fold(e, fold) from e

    report = CVReport(
        per_fold=results,
        config_hash=config.config_hash(),
        name=config.name,
        reference=dict(config.reference),
    )
    report.save_json(out / "cv_report.json")
    (out / "cv_report.md").write_text(report.markdown(), encoding="utf-8")
    for result in results:
        result.report.save_csv(out / f"fold_{result.fold}_metrics.csv")
    logger.info("Cross-validation mean dice=%.4f mean_iou=%.4f", report.mean_dice, report.mean_miou)
    return report


def probability_png(prob_map: np.ndarray) -> np.ndarray:
    """8-bit quantisation ``round(255 * p)`` of an (H, W) probability map."""
    return np.rint(np.clip(prob_map, 0.0, 1.0) * 255.0).astype(np.uint8)


def run_predict(
    manifest: Union[str, Path],
    image_path: Union[str, Path],
    out: Union[str, Path],
    threshold: float = 0.5,
) -> List[Path]:
    """Write ``<out>_prob.png`` and ``<out>_mask.png`` for one image.

    A cascade manifest also yields ``<out>_stage1_prob.png`` so single-stage
    and cascaded maps can be compared side by side.

    Returns:
        Written file paths.

    Raises:
        DataError: If the image size is not divisible by 32.
        ShapeError: If the image does not match the model's input.
    """
    model = load_model(manifest)
    image = read_image(image_path)
    batch = image[None, None]
    _check_image(model, batch, Path(image_path))

    stage1_map: Optional[np.ndarray] = None
    if isinstance(model, CascadeModel):
        stage1_map, prob = model.predict_stages(batch)
    else:
        prob = model.predict(batch)

    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written = [out.with_name(f"{out.name}_prob.png"), out.with_name(f"{out.name}_mask.png")]
    Image.fromarray(probability_png(prob[0, 0])).save(written[0])
    mask = binarize(prob[0, 0], threshold) * np.uint8(255)
    Image.fromarray(mask.astype(np.uint8)).save(written[1])
    if stage1_map is not None:
        written.append(out.with_name(f"{out.name}_stage1_prob.png"))
        Image.fromarray(probability_png(stage1_map[0, 0])).save(written[2])
    logger.info("Wrote %s", ", ".join(str(p) for p in written))
    return written


def _check_image(model: Model, batch: np.ndarray, path: Path) -> None:
    if batch.shape[1] != model.in_channels or batch.shape[2:] != model.input_size:
        raise ShapeError(
            f"{path.name} is {batch.shape[2]}x{batch.shape[3]} with {batch.shape[1]} channel(s); "
            f"the model expects {model.input_size[0]}x{model.input_size[1]} with "
            f"{model.in_channels}"
        )
