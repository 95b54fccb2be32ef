"""Named parameter storage shared by network graphs, the optimizer and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Tuple

import numpy as np

from cdsl.errors import ShapeError

BUFFER_SUFFIXES = (".running_mean", ".running_var")


def is_buffer(name: str) -> bool:
    """Running statistics are stored with the parameters but never optimised."""
    return name.endswith(BUFFER_SUFFIXES)


@dataclass(eq=False)
class ParameterStore:
    """Ordered mapping of dotted names (``enc1.conv1.weight``) to arrays.

    Insertion order is the canonical order used for initialisation,
    optimisation and checkpoint layout.
    """

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"Unknown parameter '{name}'") from None

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors and self.tensors[name].shape != value.shape:
            raise ShapeError(
                f"Parameter '{name}' has shape {self.tensors[name].shape}, got {value.shape}"
            )
        self.tensors[name] = value

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.tensors.items())

    def names(self) -> List[str]:
        return list(self.tensors)

    def trainable_names(self) -> List[str]:
        """Names of the tensors the optimizer updates."""
        return [name for name in self.tensors if not is_buffer(name)]

    @property
    def dtype(self) -> np.dtype:
        for array in self.tensors.values():
            return array.dtype
        return np.dtype(np.float32)

    def local(self, prefix: str, names: Tuple[str, ...]) -> Dict[str, np.ndarray]:
        """Arrays ``prefix.name`` for each local name, keyed by the local name."""
        return {name: self[f"{prefix}.{name}" if prefix else name] for name in names}

    def copy(self) -> ParameterStore:
        return ParameterStore({name: array.copy() for name, array in self.tensors.items()})

    def astype(self, dtype: np.dtype | type) -> ParameterStore:
        """Copy converted to ``dtype`` (float64 for gradient checks)."""
        return ParameterStore(
            {name: array.astype(dtype, copy=True) for name, array in self.tensors.items()}
        )

    def zeros_like(self, trainable_only: bool = True) -> Dict[str, np.ndarray]:
        names = self.trainable_names() if trainable_only else self.names()
        return {name: np.zeros_like(self.tensors[name]) for name in names}

    def equals(self, other: ParameterStore) -> bool:
        """Bit-identical names, shapes, dtypes and contents."""
        if self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )

    def num_parameters(self, trainable_only: bool = True) -> int:
        names = self.trainable_names() if trainable_only else self.names()
        return int(sum(self.tensors[name].size for name in names))

    @classmethod
    def from_mapping(cls, tensors: Mapping[str, np.ndarray]) -> ParameterStore:
        return cls({name: np.asarray(array) for name, array in tensors.items()})
