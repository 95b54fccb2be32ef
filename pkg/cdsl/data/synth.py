"""Seeded synthetic stand-in for the MRI dataset: smooth noise plus one bright ellipse."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Dict, List

import numpy as np

from cdsl.constants import SPATIAL_DIVISOR
from cdsl.errors import ConfigError

from .dataset import DIRECTIONS, TUMOR_TYPES, ImageSample
from .resize import resize_to

MIN_FOREGROUND = 0.02
MAX_FOREGROUND = 0.30


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic dataset."""

    n: int = 16
    size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigError(f"Synthetic sample count must be >= 1, got {self.n}")
        if self.size < SPATIAL_DIVISOR or self.size % SPATIAL_DIVISOR:
            raise ConfigError(
                f"Synthetic size must be a positive multiple of {SPATIAL_DIVISOR}, got {self.size}"
            )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> SynthSpec:
        return cls(**data)


def _smooth_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.standard_normal((size // 8, size // 8))
    noise = resize_to(coarse, size, size)
    span = noise.max() - noise.min()
    return (noise - noise.min()) / span if span > 0 else np.zeros_like(noise)


def _ellipse_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    while True:
        fraction = rng.uniform(0.04, 0.25)
        aspect = rng.uniform(0.6, 1.6)
        semi_a = np.sqrt(fraction * size * size / (np.pi * aspect))
        semi_b = aspect * semi_a
        radius = max(semi_a, semi_b)
        if 2 * radius + 2 >= size:
            continue
        cy = rng.uniform(radius + 1, size - radius - 1)
        cx = rng.uniform(radius + 1, size - radius - 1)
        theta = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask = ((u / semi_a) ** 2 + (v / semi_b) ** 2 <= 1.0).astype(np.uint8)
        if MIN_FOREGROUND <= mask.mean() <= MAX_FOREGROUND:
            return mask


def synth_sample(index: int, size: int, seed: int) -> ImageSample:
    """Generate sample ``index`` of the synthetic set for ``seed``."""
    rng = np.random.default_rng([seed, index])
    background = 0.15 + 0.3 * _smooth_noise(rng, size)
    mask = _ellipse_mask(rng, size)
    lift = rng.uniform(0.35, 0.5)
    image = np.clip(background + lift * mask, 0.0, 1.0)
    return ImageSample(
        id=f"synth_{index:05d}",
        image=image,
        mask=mask,
        direction=DIRECTIONS[int(rng.integers(0, 3))],  # type: ignore[arg-type]
        tumor_type=TUMOR_TYPES[int(rng.integers(0, 3))],  # type: ignore[arg-type]
        metadata={"synthetic": True, "seed": seed},
    )


def synth_dataset(n: int, size: int, seed: int) -> List[ImageSample]:
    """Generate ``n`` synthetic samples of ``size`` x ``size`` pixels.

    Each image is a smoothed random-noise background with one filled ellipse of
    elevated intensity; the mask is the ellipse and covers 2%-30% of the pixels.
    The output is a pure function of ``(n, size, seed)``.
    """
    spec = SynthSpec(n=n, size=size, seed=seed)
    return [synth_sample(i, spec.size, spec.seed) for i in range(spec.n)]
