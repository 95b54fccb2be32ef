"""Hard Dice and standard (two-class) mean IoU on thresholded predictions."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np

from cdsl.data.dataset import ImageSample, stack_batch
from cdsl.errors import DataError, ShapeError

from .base import SegmentationModel

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("id", "dice", "iou_fg", "iou_bg", "mean_iou")
GROUP_FIELDS = ("direction", "tumor_type")


@dataclass(frozen=True)
class Confusion:
    """Pixel counts of one prediction/ground-truth comparison."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"Confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: Confusion) -> Confusion:
        return Confusion(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


def binarize(P: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where ``P > threshold`` (strict), else 0."""
    return (np.asarray(P) > threshold).astype(np.uint8)


def confusion(pred_mask: np.ndarray, gt_mask: np.ndarray) -> Confusion:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeError(f"Prediction mask shape {pred.shape} != ground-truth shape {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return Confusion(tp=tp, fp=fp, fn=fn, tn=pred.size - tp - fp - fn)


def hard_dice(c: Confusion) -> float:
    """2tp / (2tp + fn + fp); 1.0 when both masks are empty."""
    denominator = 2 * c.tp + c.fn + c.fp
    return 1.0 if denominator == 0 else 2 * c.tp / denominator


def iou_foreground(c: Confusion) -> float:
    union = c.tp + c.fp + c.fn
    return 1.0 if union == 0 else c.tp / union


def iou_background(c: Confusion) -> float:
    union = c.tn + c.fn + c.fp
    return 1.0 if union == 0 else c.tn / union


def mean_iou(c: Confusion) -> float:
    """Average of foreground and background IoU; a class absent from both masks scores 1."""
    return (iou_foreground(c) + iou_background(c)) / 2.0


@dataclass
class ImageMetrics:
    """Scores of one image."""

    id: str
    dice: float
    iou_fg: float
    iou_bg: float
    mean_iou: float
    confusion: Confusion = field(default_factory=Confusion)
    direction: str = "unknown"
    tumor_type: str = "unknown"

    @classmethod
    def from_masks(
        cls,
        id: str,
        pred_mask: np.ndarray,
        gt_mask: np.ndarray,
        direction: str = "unknown",
        tumor_type: str = "unknown",
    ) -> ImageMetrics:
        c = confusion(pred_mask, gt_mask)
        return cls(
            id=id,
            dice=hard_dice(c),
            iou_fg=iou_foreground(c),
            iou_bg=iou_background(c),
            mean_iou=mean_iou(c),
            confusion=c,
            direction=direction,
            tumor_type=tumor_type,
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["confusion"] = self.confusion.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> ImageMetrics:
        values = dict(data)
        values["confusion"] = Confusion(**values.get("confusion", {}))
        return cls(**values)


@dataclass
class MetricsReport:
    """Per-image metrics and their arithmetic-mean aggregate."""

    per_image: List[ImageMetrics] = field(default_factory=list)
    threshold: float = 0.5

    def _column(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.per_image], dtype=np.float64)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self._column("dice"))) if self.per_image else float("nan")

    @property
    def mean_miou(self) -> float:
        return float(np.mean(self._column("mean_iou"))) if self.per_image else float("nan")

    @property
    def total_confusion(self) -> Confusion:
        total = Confusion()
        for m in self.per_image:
            total = total + m.confusion
        return total

    def aggregate(self) -> Dict[str, Any]:
        return {
            "count": len(self.per_image),
            "mean_dice": self.mean_dice,
            "mean_miou": self.mean_miou,
            "confusion": self.total_confusion.to_dict(),
        }

    def group_by(self, field_name: str) -> Dict[str, MetricsReport]:
        """Split the report by ``direction`` or ``tumor_type``, keys sorted."""
        if field_name not in GROUP_FIELDS:
            raise ValueError(f"Cannot group by '{field_name}'; expected one of {GROUP_FIELDS}")
        groups: Dict[str, List[ImageMetrics]] = {}
        for m in self.per_image:
            groups.setdefault(getattr(m, field_name), []).append(m)
        return {
            key: MetricsReport(groups[key], threshold=self.threshold) for key in sorted(groups)
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "aggregate": self.aggregate(),
            "per_image": [m.to_dict() for m in self.per_image],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> MetricsReport:
        return cls(
            per_image=[ImageMetrics.from_dict(m) for m in data.get("per_image", [])],
            threshold=data.get("threshold", 0.5),
        )

    def save_json(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load_json(cls, path: Union[str, Path]) -> MetricsReport:
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save_csv(self, path: Union[str, Path]) -> None:
        """One row per image, columns id,dice,iou_fg,iou_bg,mean_iou."""
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for m in self.per_image:
                writer.writerow([m.id] + [repr(getattr(m, col)) for col in CSV_COLUMNS[1:]])

    def markdown(self, title: str = "Evaluation") -> str:
        from cdsl.utils.template_renderer import render_report

        groups = {
            name: {key: report.aggregate() for key, report in self.group_by(name).items()}
            for name in GROUP_FIELDS
        }
        return render_report(
            "metrics_report", title=title, report=self.to_dict(), groups=groups
        )


def evaluate_dataset(
    model: SegmentationModel,
    samples: Sequence[ImageSample],
    threshold: float = 0.5,
    batch_size: int = 8,
) -> MetricsReport:
    """Score ``model`` on ``samples`` with per-image hard Dice and mean IoU.

    Args:
        model: Network or cascade exposing ``predict``.
        samples: Samples whose size and channels match the model.
        threshold: Binarisation threshold (strict ``>``).
        batch_size: Images per predict call; does not affect the result.

    Returns:
        MetricsReport in sample order.

    Raises:
        DataError: If ``samples`` is empty.
        ShapeError: If a sample does not match the model's input.
    """
    if not samples:
        raise DataError("Cannot evaluate an empty sample list")
    per_image: List[ImageMetrics] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images, masks = stack_batch(chunk)
        if images.shape[1] != model.in_channels or images.shape[2:] != model.input_size:
            raise ShapeError(
                f"Samples of shape {images.shape[1:]} do not fit a model for "
                f"({model.in_channels}, {model.input_size[0]}, {model.input_size[1]})"
            )
        preds = binarize(model.predict(images), threshold)
        for sample, pred, mask in zip(chunk, preds, masks):
            per_image.append(
                ImageMetrics.from_masks(
                    sample.id, pred[0], mask[0], sample.direction, sample.tumor_type
                )
            )
    report = MetricsReport(per_image, threshold=threshold)
    logger.debug(
        "Evaluated %d images: dice=%.4f miou=%.4f",
        len(per_image),
        report.mean_dice,
        report.mean_miou,
    )
    return report
