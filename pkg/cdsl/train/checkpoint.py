"""Binary checkpoint format for a ParameterStore.

Layout (all integers little-endian)::

    b"CDSL" | u32 version=1 | u32 tensor count | u32 reserved=0
    per tensor: u16 name length | UTF-8 name | u8 ndim | ndim x u32 dims | float32 data
"""

from __future__ import annotations

import io
import logging
import struct
import warnings
from pathlib import Path
from typing import Dict, Union

import numpy as np

from cdsl.core.params import ParameterStore
from cdsl.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"CDSL"
VERSION = 1
HEADER = struct.Struct("<4sIII")
FLOAT_LE = np.dtype("<f4")


def encode_checkpoint(store: ParameterStore) -> bytes:
    """Serialise ``store`` in insertion order."""
    if store.dtype != np.float32:
        warnings.warn(f"Casting {store.dtype} parameters to float32 for the checkpoint")
    buffer = io.BytesIO()
    buffer.write(HEADER.pack(MAGIC, VERSION, len(store), 0))
    for name, array in store.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"Tensor name too long: {name[:40]}...")
        if array.ndim > 0xFF:
            raise CheckpointError(f"Tensor '{name}' has too many dimensions ({array.ndim})")
        buffer.write(struct.pack("<H", len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack("<B", array.ndim))
        buffer.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buffer.write(np.ascontiguousarray(array, dtype=FLOAT_LE).tobytes())
    return buffer.getvalue()


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> ParameterStore:
    """Parse checkpoint bytes; nothing is returned unless the whole file is valid.

    Raises:
        CheckpointError: On a bad magic, unknown version, truncation or trailing data.
    """
    if len(data) < HEADER.size:
        raise CheckpointError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, count, _reserved = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")

    offset = HEADER.size
    tensors: Dict[str, np.ndarray] = {}

    def take(size: int, what: str) -> bytes:
        nonlocal offset
        if offset + size > len(data):
            raise CheckpointError(
                f"{source}: truncated while reading {what} at byte {offset} "
                f"(tensor {len(tensors) + 1} of {count})"
            )
        chunk = data[offset : offset + size]
        offset += size
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{source}: tensor name is not valid UTF-8") from e
        (ndim,) = struct.unpack("<B", take(1, f"ndim of '{name}'"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"dims of '{name}'"))
        size = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * size, f"data of '{name}'")
        if name in tensors:
            raise CheckpointError(f"{source}: duplicate tensor '{name}'")
        tensors[name] = np.frombuffer(payload, dtype=FLOAT_LE).astype(np.float32).reshape(dims)

    if offset != len(data):
        raise CheckpointError(f"{source}: {len(data) - offset} unexpected trailing bytes")
    return ParameterStore(tensors)


def save_checkpoint(store: ParameterStore, path: Union[str, Path]) -> None:
    """Write ``store`` to ``path``."""
    path = Path(path)
    path.write_bytes(encode_checkpoint(store))
    logger.debug("Saved %d tensors to %s", len(store), path)


def load_checkpoint(path: Union[str, Path]) -> ParameterStore:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        CheckpointError: If the file is not a valid checkpoint.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), source=str(path))
