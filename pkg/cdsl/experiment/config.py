"""Experiment configuration: presets, JSON files, dotted overrides and seed derivation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np

from cdsl.constants import env_seed
from cdsl.core.network import NetworkConfig
from cdsl.data.synth import SynthSpec
from cdsl.errors import ConfigError
from cdsl.train.trainer import TrainConfig

PRESETS_DIR = Path(__file__).parent / "presets"
HASH_EXCLUDED = ("output_dir", "threads")

# Leading keys for derive_seed; a fold index, when present, follows.
FOLD_STREAM = 1
SPLIT_STREAM = 2
TRAIN_STREAM = 3


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 32-bit child seed of ``seed`` for the integer path ``keys``."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    """Everything one run needs; ``seed`` is the master seed for folds, splits and training."""

    name: str = "experiment"
    data_root: Optional[str] = None
    synth: Optional[SynthSpec] = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cascade: bool = False
    k_folds: int = 5
    val_fraction: float = 0.2
    threshold: float = 0.5
    seed: int = 0
    output_dir: str = "runs/experiment"
    threads: Optional[int] = None
    reference: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.data_root is None and self.synth is None:
            raise ConfigError("Either data_root or synth must be set")
        if self.data_root is not None:
            self.synth = None
        elif self.synth is not None:
            size = (self.synth.size, self.synth.size)
            if size != tuple(self.network.input_size):
                raise ConfigError(
                    f"synth.size {self.synth.size} does not match network.input_size "
                    f"{list(self.network.input_size)}"
                )
        if self.k_folds < 2:
            raise ConfigError(f"k_folds must be >= 2, got {self.k_folds}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in [0, 1), got {self.threshold}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "data_root": self.data_root,
            "synth": self.synth.to_dict() if self.synth else None,
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
            "cascade": self.cascade,
            "k_folds": self.k_folds,
            "val_fraction": self.val_fraction,
            "threshold": self.threshold,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "threads": self.threads,
            "reference": dict(self.reference),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ExperimentConfig:
        """Build from a (possibly partial) nested dictionary.

        Raises:
            ConfigError: On unknown keys or invalid values.
        """
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown experiment config keys: {sorted(unknown)}")
        values = dict(data)
        try:
            if values.get("synth") is not None:
                values["synth"] = SynthSpec.from_dict(values["synth"])
            values["network"] = NetworkConfig.from_dict(values.get("network") or {})
            values["train"] = TrainConfig.from_dict(values.get("train") or {})
        except TypeError as e:
            raise ConfigError(f"Invalid config value: {e}") from e
        return cls(**values)

    def save_to_file(self, file_path: Union[str, Path]) -> None:
        with open(file_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load_from_file(cls, file_path: Union[str, Path]) -> ExperimentConfig:
        return cls.from_dict(_read_json(Path(file_path)))

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON, ignoring where and how parallel the run happens."""
        data = {k: v for k, v in self.to_dict().items() if k not in HASH_EXCLUDED}
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def seed_for(self, stream: int, *keys: int) -> int:
        return derive_seed(self.seed, stream, *keys)

    def derived_train_config(self, *keys: int) -> TrainConfig:
        """Training settings reseeded from the master seed (``keys`` is the fold, if any)."""
        return TrainConfig.from_dict(
            {**self.train.to_dict(), "seed": self.seed_for(TRAIN_STREAM, *keys)}
        )


def _read_json(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return data


def list_presets() -> List[str]:
    return sorted(path.stem for path in PRESETS_DIR.glob("*.json"))


def load_preset(name: str) -> Dict[str, Any]:
    """Raw dictionary of a shipped preset (``bce``, ``dual``, ``cascade`` ...)."""
    path = PRESETS_DIR / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"Unknown preset '{name}'; available: {list_presets()}")
    return _read_json(path)


def parse_value(text: str) -> Any:
    """JSON value if ``text`` parses as JSON, else the plain string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Set dotted keys (``train.epochs``) on a copy of ``data``."""
    result = copy.deepcopy(data)
    for dotted, value in overrides.items():
        target = result
        *parents, leaf = dotted.replace("-", "_").split(".")
        for key in parents:
            child = target.get(key)
            if child is None:
                child = target[key] = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"Cannot set '{dotted}': '{key}' is not a section")
            target = child
        target[leaf] = value
    return result


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def resolve_config(
    preset: Optional[str] = None,
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    use_env: bool = True,
) -> ExperimentConfig:
    """Layer preset < config file < dotted overrides < ``CDSL_SEED``.

    Args:
        preset: Name of a shipped preset.
        config_path: JSON config file, typically a previous run's ``run.json``.
        overrides: Dotted-key values, e.g. ``{"train.epochs": 5}``.
        use_env: Apply the ``CDSL_SEED`` environment override.

    Returns:
        Fully resolved ExperimentConfig.
    """
    data: Dict[str, Any] = {}
    if preset:
        data = _merge(data, load_preset(preset))
    if config_path:
        data = _merge(data, _read_json(Path(config_path)))
    if overrides:
        data = apply_overrides(data, overrides)
    seed = env_seed() if use_env else None
    if seed is not None:
        data["seed"] = seed
    if data.get("data_root") is None and data.get("synth") is None:
        data["synth"] = {"n": 16, "size": _square_size(data), "seed": data.get("seed", 0)}
    return ExperimentConfig.from_dict(data)


def _square_size(data: Mapping[str, Any]) -> int:
    size = (data.get("network") or {}).get("input_size", NetworkConfig().input_size)
    return int(size[0])
