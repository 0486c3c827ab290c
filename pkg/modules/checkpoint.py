"""
Binary checkpoint codec for named float64 parameter arrays.

Layout: the magic ``RFCKPT1`` followed by entries of
``u32 name_len | name (utf-8) | u32 rank | u32 extents... | <f8 values``.
"""

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Union

import numpy as np

from modules.nn import Module

MAGIC = b"RFCKPT1"


class CheckpointError(ValueError):
    """Raised for unreadable or malformed checkpoint files"""


class CheckpointMismatchError(CheckpointError):
    """Raised when checkpoint names/shapes disagree with the model"""


def write_checkpoint(state: Dict[str, np.ndarray], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, array in state.items():
            encoded = name.encode("utf-8")
            array = np.asarray(array, dtype="<f8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", array.ndim))
            if array.ndim:
                f.write(struct.pack(f"<{array.ndim}I", *array.shape))
            f.write(np.ascontiguousarray(array).tobytes())
    return path


def read_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, expected {MAGIC!r}")

    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {offset}")
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    while offset < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        state[name] = values.reshape(shape)
    return state


def save_model(model: Module, path: Union[str, Path]) -> Path:
    return write_checkpoint(model.state_dict(), path)


def load_model(model: Module, path: Union[str, Path]) -> None:
    """Load a checkpoint into ``model`` after checking every name and shape"""
    state = read_checkpoint(path)
    expected = OrderedDict((name, p.shape) for name, p in model.named_parameters())

    missing = [n for n in expected if n not in state]
    unexpected = [n for n in state if n not in expected]
    if missing or unexpected:
        raise CheckpointMismatchError(
            f"{path}: parameter names differ (missing {missing[:5]}, unexpected {unexpected[:5]})")
    for name, shape in expected.items():
        if tuple(state[name].shape) != tuple(shape):
            raise CheckpointMismatchError(
                f"parameter '{name}': checkpoint shape {tuple(state[name].shape)} vs model shape {tuple(shape)}")
    model.load_state_dict(state)
