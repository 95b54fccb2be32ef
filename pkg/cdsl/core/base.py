from __future__ import annotations

from typing import Any, Protocol, Tuple, runtime_checkable

import numpy as np


@runtime_checkable
class SegmentationModel(Protocol):
    """Anything that maps an image batch to a foreground probability map."""

    @property
    def input_size(self) -> Tuple[int, int]:
        """Spatial (H, W) the model was built for."""
        ...

    @property
    def in_channels(self) -> int:
        """Channels expected in each input batch."""
        ...

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """Eval-mode probabilities, shape (n, 1, H, W)."""
        ...

    def to_dict(self) -> dict[str, Any]:
        """Describe the model's configuration."""
        ...
