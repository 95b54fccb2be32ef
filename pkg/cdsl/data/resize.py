"""Bilinear resampling with the half-pixel (align_corners=False) convention."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from cdsl.constants import ALLOWED_SCALE_FACTORS
from cdsl.errors import ShapeError


def target_size(size: int, factor: float) -> int:
    """Return ``size * factor`` as an integer, or raise if it is fractional."""
    scaled = size * factor
    rounded = int(round(scaled))
    if rounded < 1 or abs(scaled - rounded) > 1e-9:
        raise ShapeError(f"Size {size} scaled by {factor} is not a positive integer ({scaled})")
    return rounded


@lru_cache(maxsize=64)
def _interpolation_matrix(in_size: int, out_size: int) -> np.ndarray:
    scale = out_size / in_size
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        src = (i + 0.5) / scale - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_size - 1)
        weight = src - lo
        matrix[i, lo] += 1.0 - weight
        matrix[i, hi] += weight
    matrix.setflags(write=False)
    return matrix


def interpolation_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row-stochastic matrix ``M`` such that ``M @ signal`` resamples a 1-D signal.

    Output sample ``i`` sits at source coordinate ``(i + 0.5) / scale - 0.5``,
    clamped to the valid range, and mixes its two neighbours linearly.
    """
    if in_size < 1 or out_size < 1:
        raise ShapeError(f"Invalid resample sizes {in_size} -> {out_size}")
    return _interpolation_matrix(in_size, out_size)


def resize_to(tensor: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize the last two axes of ``tensor`` to ``(height, width)``."""
    rows = interpolation_matrix(tensor.shape[-2], height).astype(tensor.dtype, copy=False)
    cols = interpolation_matrix(tensor.shape[-1], width).astype(tensor.dtype, copy=False)
    return np.einsum("ih,...hw,jw->...ij", rows, tensor, cols)


def resize_tensor(tensor: np.ndarray, factor: float) -> np.ndarray:
    """Resize the last two axes of ``tensor`` by ``factor``."""
    height = target_size(tensor.shape[-2], factor)
    width = target_size(tensor.shape[-1], factor)
    return resize_to(tensor, height, width)


def resize_tensor_backward(grad: np.ndarray, in_height: int, in_width: int) -> np.ndarray:
    """Adjoint of :func:`resize_to`: maps an output gradient back to the input grid."""
    rows = interpolation_matrix(in_height, grad.shape[-2]).astype(grad.dtype, copy=False)
    cols = interpolation_matrix(in_width, grad.shape[-1]).astype(grad.dtype, copy=False)
    return np.einsum("ih,...ij,jw->...hw", rows, grad, cols)


def resize_bilinear(image: np.ndarray, factor: float) -> np.ndarray:
    """Downsample a 2-D image by one of the supported scale factors.

    Args:
        image: 2-D grid of shape (H, W).
        factor: One of 1/2, 1/4 or 1/8.

    Returns:
        Grid of shape (H * factor, W * factor) whose values stay within the
        input's [min, max] range.

    Raises:
        ShapeError: If the image is not 2-D or the target size is fractional.
    """
    if image.ndim != 2:
        raise ShapeError(f"resize_bilinear expects a 2-D image, got shape {image.shape}")
    if not any(abs(factor - allowed) < 1e-12 for allowed in ALLOWED_SCALE_FACTORS):
        raise ShapeError(
            f"Unsupported scale factor {factor}; expected one of {ALLOWED_SCALE_FACTORS}"
        )
    return resize_tensor(image, factor)
