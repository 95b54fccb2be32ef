"""Training loss: per-pixel BCE minus batch-level soft Dice, with analytic gradients."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from cdsl.constants import PROB_CLAMP
from cdsl.errors import ShapeError

DICE_SMOOTH = 1.0


def _check(P: np.ndarray, G: np.ndarray) -> None:
    if P.shape != G.shape:
        raise ShapeError(f"Prediction shape {P.shape} != ground-truth shape {G.shape}")


def _clamped(P: np.ndarray) -> np.ndarray:
    return np.clip(P.astype(np.float64, copy=False), PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_loss(P: np.ndarray, G: np.ndarray) -> float:
    """Mean over all pixels of -(G ln P + (1-G) ln(1-P)), P clamped to [1e-7, 1-1e-7]."""
    _check(P, G)
    p = _clamped(P)
    g = G.astype(np.float64, copy=False)
    return float(np.mean(-(g * np.log(p) + (1.0 - g) * np.log1p(-p))))


def bce_loss_grad(P: np.ndarray, G: np.ndarray) -> np.ndarray:
    """d bce_loss / d P, evaluated at the clamped probabilities."""
    _check(P, G)
    p = _clamped(P)
    g = G.astype(np.float64, copy=False)
    grad = (p - g) / (p * (1.0 - p)) / P.size
    return grad.astype(P.dtype, copy=False)


def soft_dice(P: np.ndarray, G: np.ndarray, smooth: float = DICE_SMOOTH) -> float:
    """(2 sum(P G) + smooth) / (sum P + sum G + smooth) over the whole batch."""
    _check(P, G)
    p = P.astype(np.float64, copy=False)
    g = G.astype(np.float64, copy=False)
    return float((2.0 * np.sum(p * g) + smooth) / (np.sum(p) + np.sum(g) + smooth))


def soft_dice_grad(P: np.ndarray, G: np.ndarray, smooth: float = DICE_SMOOTH) -> np.ndarray:
    _check(P, G)
    p = P.astype(np.float64, copy=False)
    g = G.astype(np.float64, copy=False)
    numerator = 2.0 * np.sum(p * g) + smooth
    denominator = np.sum(p) + np.sum(g) + smooth
    grad = (2.0 * g * denominator - numerator) / denominator**2
    return grad.astype(P.dtype, copy=False)


def combined_loss(P: np.ndarray, G: np.ndarray, use_dice: bool = True) -> float:
    """``bce - soft_dice`` when ``use_dice``, plain BCE otherwise."""
    loss = bce_loss(P, G)
    if use_dice:
        loss -= soft_dice(P, G)
    return loss


def combined_loss_grad(P: np.ndarray, G: np.ndarray, use_dice: bool = True) -> np.ndarray:
    grad = bce_loss_grad(P, G)
    if use_dice:
        grad = grad - soft_dice_grad(P, G)
    return grad


def loss_and_grad(P: np.ndarray, G: np.ndarray, use_dice: bool = True) -> Tuple[float, np.ndarray]:
    """Loss value and its gradient w.r.t. ``P`` in one call."""
    return combined_loss(P, G, use_dice), combined_loss_grad(P, G, use_dice)
