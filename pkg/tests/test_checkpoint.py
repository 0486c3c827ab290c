import struct

import numpy as np
import pytest

from modules.checkpoint import (
    MAGIC,
    CheckpointError,
    CheckpointMismatchError,
    load_model,
    read_checkpoint,
    save_model,
    write_checkpoint,
)
from modules.nn import Linear, Module


class TinyNet(Module):
    def __init__(self, width, rng):
        super().__init__()
        self.first = Linear(3, width, rng)
        self.second = Linear(width, 1, rng)


def test_layout_header_and_first_entry(tmp_path):
    """Magic, u32 name length, name, u32 rank, u32 extents, little-endian float64 values"""
    path = write_checkpoint({"w": np.array([[1.0, 2.0]])}, tmp_path / "a.ckpt")
    blob = path.read_bytes()
    assert blob.startswith(MAGIC)
    offset = len(MAGIC)
    assert struct.unpack_from("<I", blob, offset)[0] == 1
    assert blob[offset + 4:offset + 5] == b"w"
    assert struct.unpack_from("<3I", blob, offset + 5) == (2, 1, 2)
    assert struct.unpack_from("<2d", blob, offset + 17) == (1.0, 2.0)


def test_model_round_trip(tmp_path, rng):
    net = TinyNet(4, rng)
    save_model(net, tmp_path / "net.ckpt")
    other = TinyNet(4, np.random.default_rng(99))
    load_model(other, tmp_path / "net.ckpt")
    for (name, a), (_, b) in zip(net.named_parameters(), other.named_parameters()):
        assert np.array_equal(a.data, b.data), name
    assert list(read_checkpoint(tmp_path / "net.ckpt")) == [n for n, _ in net.named_parameters()]


def test_shape_mismatch_prints_both_shapes(tmp_path, rng):
    save_model(TinyNet(4, rng), tmp_path / "net.ckpt")
    with pytest.raises(CheckpointMismatchError, match=r"first.weight.*\(3, 4\).*\(3, 5\)"):
        load_model(TinyNet(5, rng), tmp_path / "net.ckpt")


def test_bad_magic_and_truncation(tmp_path, rng):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT")
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(bad)

    good = save_model(TinyNet(2, rng), tmp_path / "good.ckpt")
    truncated = tmp_path / "cut.ckpt"
    truncated.write_bytes(good.read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(truncated)
