"""Plain SGD with momentum: v <- mu * v + g, w <- w - lr * v."""

from __future__ import annotations

from typing import Dict, MutableMapping, Tuple, Union

import numpy as np

from cdsl.core.params import ParameterStore
from cdsl.errors import ConfigError, ShapeError

Params = Union[ParameterStore, MutableMapping[str, np.ndarray]]


def sgd_momentum_step(
    params: Params,
    grads: Dict[str, np.ndarray],
    velocity: Dict[str, np.ndarray],
    lr: float,
    mu: float,
) -> Tuple[Params, Dict[str, np.ndarray]]:
    """Apply one momentum step in place, tensor by tensor in ``grads`` order.

    Args:
        params: Parameter arrays, updated in place.
        grads: Gradient per trainable parameter name.
        velocity: Velocity per name, zeros before the first step; updated in place.
        lr: Learning rate.
        mu: Momentum coefficient.

    Returns:
        The updated ``(params, velocity)``.

    Raises:
        ShapeError: If a gradient or velocity does not match its parameter.
    """
    for name, grad in grads.items():
        weight = params[name]
        if grad.shape != weight.shape:
            raise ShapeError(
                f"Gradient for '{name}' has shape {grad.shape}, parameter is {weight.shape}"
            )
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(weight)
        elif v.shape != weight.shape:
            raise ShapeError(
                f"Velocity for '{name}' has shape {v.shape}, parameter is {weight.shape}"
            )
        v *= mu
        v += grad.astype(v.dtype, copy=False)
        weight -= (lr * v).astype(weight.dtype, copy=False)
    return params, velocity


class SGDMomentum:
    """Stateful wrapper owning the velocity buffers of one training run."""

    def __init__(self, learning_rate: float, momentum: float):
        if learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {learning_rate}")
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Params, grads: Dict[str, np.ndarray]) -> None:
        sgd_momentum_step(params, grads, self.velocity, self.learning_rate, self.momentum)
