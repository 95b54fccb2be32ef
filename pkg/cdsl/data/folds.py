"""Cross-validation fold planning and train/validation splits."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from cdsl.errors import ConfigError, DataError


@dataclass(frozen=True)
class FoldPlan:
    """Deterministic assignment of sample ids to ``k`` folds.

    ``assignment`` keeps the caller's id order; every fold index lies in
    ``[0, k)`` and fold sizes differ by at most one.
    """

    k: int
    seed: int
    assignment: Dict[str, int]
    val_fraction: float = 0.2
    _sizes: Tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ConfigError(f"Fold count must be at least 2, got {self.k}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        sizes = [0] * self.k
        for sample_id, fold in self.assignment.items():
            if not 0 <= fold < self.k:
                raise ConfigError(
                    f"Sample '{sample_id}' assigned to fold {fold} outside [0, {self.k})"
                )
            sizes[fold] += 1
        if max(sizes) - min(sizes) > 1:
            raise ConfigError(f"Fold sizes {sizes} differ by more than one")
        object.__setattr__(self, "_sizes", tuple(sizes))

    @property
    def ids(self) -> List[str]:
        return list(self.assignment)

    def fold_sizes(self) -> Tuple[int, ...]:
        """Number of ids in each fold."""
        return self._sizes

    def test_ids(self, fold: int) -> List[str]:
        """Ids held out as the test set of ``fold``."""
        self._check_fold(fold)
        return [sample_id for sample_id, f in self.assignment.items() if f == fold]

    def train_ids(self, fold: int) -> List[str]:
        """Ids of every other fold (training plus validation pool)."""
        self._check_fold(fold)
        return [sample_id for sample_id, f in self.assignment.items() if f != fold]

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise ConfigError(f"Fold {fold} outside [0, {self.k})")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "assignment": dict(self.assignment),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> FoldPlan:
        return cls(
            k=int(data["k"]),
            seed=int(data["seed"]),
            assignment={str(key): int(value) for key, value in data["assignment"].items()},
            val_fraction=float(data.get("val_fraction", 0.2)),
        )


def _check_unique(ids: Sequence[str]) -> None:
    if len(set(ids)) != len(ids):
        duplicates = sorted(i for i, count in Counter(ids).items() if count > 1)
        raise DataError(f"Duplicate sample ids: {duplicates[:10]}")


def make_folds(ids: Sequence[str], k: int, seed: int, val_fraction: float = 0.2) -> FoldPlan:
    """Shuffle ``ids`` with a seeded Fisher-Yates pass and deal them round-robin into folds.

    Args:
        ids: Unique sample ids.
        k: Number of folds (>= 2).
        seed: Shuffle seed.
        val_fraction: Validation share recorded on the plan.

    Returns:
        FoldPlan whose folds partition ``ids``.

    Raises:
        ConfigError: If ``k < 2`` or there are fewer ids than folds.
        DataError: If ``ids`` contains duplicates.
    """
    if k < 2:
        raise ConfigError(f"Fold count must be at least 2, got {k}")
    if len(ids) < k:
        raise ConfigError(f"Need at least {k} samples for {k} folds, got {len(ids)}")
    _check_unique(ids)

    rng = np.random.default_rng(seed)
    order = list(ids)
    for i in range(len(order) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]

    position = {sample_id: index for index, sample_id in enumerate(order)}
    assignment = {sample_id: position[sample_id] % k for sample_id in ids}
    return FoldPlan(k=k, seed=seed, assignment=assignment, val_fraction=val_fraction)


def split_train_val(
    train_ids: Sequence[str], val_fraction: float, seed: int
) -> Tuple[List[str], List[str]]:
    """Split ids into (train, validation) after a seeded shuffle.

    The first ``ceil(val_fraction * n)`` shuffled ids become validation.
    Both returned lists keep the caller's relative order.

    Raises:
        ConfigError: If ``val_fraction`` is outside (0, 1).
        DataError: If ``train_ids`` is empty or has duplicates, or if
            ``ceil(val_fraction * n) >= n`` so no training ids would remain.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if not train_ids:
        raise DataError("Cannot split an empty id list")
    _check_unique(train_ids)

    n = len(train_ids)
    n_val = math.ceil(round(val_fraction * n, 9))
    if n_val >= n:
        raise DataError(f"val_fraction {val_fraction} leaves no training ids out of {n}")

    rng = np.random.default_rng(seed)
    permutation = rng.permutation(n)
    val_set = {train_ids[i] for i in permutation[:n_val]}
    train = [i for i in train_ids if i not in val_set]
    val = [i for i in train_ids if i in val_set]
    return train, val
