"""Image/mask samples and the paired-PNG dataset layout."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union, cast, get_args

import numpy as np
from PIL import Image

from cdsl.constants import SPATIAL_DIVISOR
from cdsl.errors import DataError

logger = logging.getLogger(__name__)

Direction = Literal["axial", "coronal", "sagittal", "unknown"]
TumorType = Literal["glioma", "meningioma", "pituitary", "unknown"]

DIRECTIONS: Tuple[str, ...] = get_args(Direction)
TUMOR_TYPES: Tuple[str, ...] = get_args(TumorType)

MASK_THRESHOLD = 128
META_FIELDS = ("id", "direction", "tumor_type")


@dataclass(frozen=True, eq=False)
class ImageSample:
    """One grayscale image with its binary tumor mask.

    ``image`` is either a single (H, W) grid or a channel stack (C, H, W); the
    latter carries stage-2 cascade inputs. ``mask`` is always (H, W) with values
    in {0, 1}. Arrays are copied and frozen on construction.
    """

    id: str
    image: np.ndarray
    mask: np.ndarray
    direction: Direction = "unknown"
    tumor_type: TumorType = "unknown"
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        image = np.array(self.image, dtype=np.float32)
        mask = np.array(self.mask, dtype=np.uint8)

        if image.ndim not in (2, 3):
            raise DataError(f"Sample '{self.id}': image must be 2-D or 3-D, got {image.shape}")
        if mask.ndim != 2:
            raise DataError(f"Sample '{self.id}': mask must be 2-D, got {mask.shape}")
        if image.shape[-2:] != mask.shape:
            raise DataError(
                f"Sample '{self.id}': image size {image.shape[-2:]} does not match "
                f"mask size {mask.shape}"
            )
        height, width = mask.shape
        if height % SPATIAL_DIVISOR or width % SPATIAL_DIVISOR:
            raise DataError(
                f"Sample '{self.id}': size {height}x{width} is not divisible by "
                f"{SPATIAL_DIVISOR}; resize the dataset (e.g. to 256x256) before loading"
            )
        if not np.isfinite(image).all() or image.min() < 0.0 or image.max() > 1.0:
            raise DataError(f"Sample '{self.id}': image values must lie in [0, 1]")
        if not np.isin(mask, (0, 1)).all():
            raise DataError(f"Sample '{self.id}': mask values must be exactly 0 or 1")
        if self.direction not in DIRECTIONS:
            raise DataError(f"Sample '{self.id}': unknown direction '{self.direction}'")
        if self.tumor_type not in TUMOR_TYPES:
            raise DataError(f"Sample '{self.id}': unknown tumor type '{self.tumor_type}'")

        image.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)

    @property
    def channels(self) -> int:
        """Number of image channels."""
        return 1 if self.image.ndim == 2 else int(self.image.shape[0])

    @property
    def size(self) -> Tuple[int, int]:
        """Spatial size (H, W)."""
        return (int(self.mask.shape[0]), int(self.mask.shape[1]))

    def as_channels(self) -> np.ndarray:
        """Image as a (C, H, W) array."""
        return self.image[None] if self.image.ndim == 2 else self.image

    def foreground_fraction(self) -> float:
        """Share of mask pixels that are foreground."""
        return float(self.mask.mean())


def stack_batch(samples: Sequence[ImageSample]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack samples into an (n, C, H, W) image batch and an (n, 1, H, W) mask batch."""
    if not samples:
        raise DataError("Cannot build a batch from zero samples")
    shapes = {sample.as_channels().shape for sample in samples}
    if len(shapes) > 1:
        raise DataError(f"Samples in one batch must share dimensions, got {sorted(shapes)}")
    images = np.stack([sample.as_channels() for sample in samples]).astype(np.float32)
    masks = np.stack([sample.mask[None] for sample in samples]).astype(np.float32)
    return images, masks


def _read_png(path: Path, sample_id: str) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "L":
            raise DataError(
                f"Sample '{sample_id}': {path.name} has mode '{img.mode}'; "
                "only 8-bit single-channel PNGs are accepted"
            )
        return np.asarray(img, dtype=np.uint8).copy()


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Read one 8-bit grayscale PNG as an (H, W) float32 grid in [0, 1].

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        DataError: If the PNG is not single-channel or its size is not
            divisible by 32.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image not found: {path}")
    pixels = _read_png(path, path.stem)
    height, width = pixels.shape
    if height % SPATIAL_DIVISOR or width % SPATIAL_DIVISOR:
        raise DataError(
            f"{path.name}: size {height}x{width} is not divisible by {SPATIAL_DIVISOR}; "
            "resize the image before predicting"
        )
    return pixels.astype(np.float32) / 255.0


def _read_meta(meta_path: Path) -> Dict[str, Dict[str, str]]:
    meta: Dict[str, Dict[str, str]] = {}
    with open(meta_path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        missing = set(META_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{meta_path} is missing columns: {sorted(missing)}")
        for row in reader:
            meta[row["id"]] = {"direction": row["direction"], "tumor_type": row["tumor_type"]}
    return meta


def _load_pair(
    sample_id: str, image_path: Path, mask_path: Path, meta: Dict[str, str]
) -> ImageSample:
    pixels = _read_png(image_path, sample_id)
    mask_pixels = _read_png(mask_path, sample_id)
    if pixels.shape != mask_pixels.shape:
        raise DataError(
            f"Sample '{sample_id}': image size {pixels.shape} does not match "
            f"mask size {mask_pixels.shape}"
        )
    return ImageSample(
        id=sample_id,
        image=pixels.astype(np.float32) / 255.0,
        mask=(mask_pixels >= MASK_THRESHOLD).astype(np.uint8),
        direction=cast(Direction, meta.get("direction", "unknown")),
        tumor_type=cast(TumorType, meta.get("tumor_type", "unknown")),
        metadata={"image_path": str(image_path), "mask_path": str(mask_path)},
    )


def load_dataset(
    root_path: Union[str, Path], max_workers: Optional[int] = None
) -> List[ImageSample]:
    """Load every image/mask pair under ``root_path``.

    Layout: ``images/<id>.png``, ``masks/<id>.png`` and an optional
    ``meta.csv`` with columns ``id,direction,tumor_type``. Pixels are divided
    by 255; masks are binarized at >= 128.

    Args:
        root_path: Dataset root directory.
        max_workers: Thread count for decoding; None lets the executor decide.

    Returns:
        Samples sorted by id.

    Raises:
        DataError: On a missing mask, size mismatch, unsupported PNG mode or
            dimensions not divisible by 32.
        FileNotFoundError: If ``images/`` or ``masks/`` is missing.
    """
    root = Path(root_path)
    image_dir = root / "images"
    mask_dir = root / "masks"
    for directory in (image_dir, mask_dir):
        if not directory.is_dir():
            raise FileNotFoundError(f"Missing dataset directory: {directory}")

    meta_path = root / "meta.csv"
    meta = _read_meta(meta_path) if meta_path.exists() else {}

    ids = sorted(path.stem for path in image_dir.glob("*.png"))
    for sample_id in ids:
        if not (mask_dir / f"{sample_id}.png").exists():
            raise DataError(f"Missing mask for image '{sample_id}' in {mask_dir}")

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        samples = list(
            pool.map(
                lambda sample_id: _load_pair(
                    sample_id,
                    image_dir / f"{sample_id}.png",
                    mask_dir / f"{sample_id}.png",
                    meta.get(sample_id, {}),
                ),
                ids,
            )
        )

    logger.info("Loaded %d samples from %s", len(samples), root)
    return samples


def save_dataset(samples: Sequence[ImageSample], root_path: Union[str, Path]) -> Path:
    """Write samples in the layout :func:`load_dataset` reads.

    Image values are quantized to ``round(255 * v)``; masks are written as 0/255
    so the mask bits round-trip exactly.
    """
    root = Path(root_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    for sample in samples:
        if sample.channels != 1:
            raise DataError(
                f"Sample '{sample.id}' has {sample.channels} channels; only 1 can be saved"
            )
        pixels = np.round(sample.as_channels()[0] * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(root / "images" / f"{sample.id}.png")
        mask = (sample.mask * 255).astype(np.uint8)
        Image.fromarray(mask).save(root / "masks" / f"{sample.id}.png")

    with open(root / "meta.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(META_FIELDS)
        for sample in samples:
            writer.writerow([sample.id, sample.direction, sample.tumor_type])

    return root


def dataset_summary(samples: Sequence[ImageSample]) -> Dict[str, Any]:
    """Counts per direction and tumor type plus the mean foreground fraction."""
    return {
        "total": len(samples),
        "by_direction": dict(sorted(Counter(s.direction for s in samples).items())),
        "by_tumor_type": dict(sorted(Counter(s.tumor_type for s in samples).items())),
        "mean_foreground_fraction": (
            float(np.mean([s.foreground_fraction() for s in samples])) if samples else 0.0
        ),
    }
