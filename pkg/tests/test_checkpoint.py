import struct

import numpy as np
import pytest

from patchsdf.checkpoint import MAGIC, CheckpointError, config_hash, read_checkpoint, write_checkpoint


@pytest.fixture
def blocks(rng):
    return {"param/a/W": rng.normal(size=(3, 4)), "bn/x/mean": rng.normal(size=5), "meta/step": np.array([7.0])}


def test_roundtrip(tmp_path, blocks):
    h = config_hash("cfg")
    write_checkpoint(tmp_path / "c.ckpt", blocks, h)
    back, h2 = read_checkpoint(tmp_path / "c.ckpt", h)
    assert h2 == h and list(back) == list(blocks)
    for k in blocks:
        assert np.array_equal(back[k], blocks[k])


def test_header_layout(tmp_path, blocks):
    write_checkpoint(tmp_path / "c.ckpt", blocks, config_hash("cfg"))
    data = (tmp_path / "c.ckpt").read_bytes()
    assert data[:8] == MAGIC
    version, = struct.unpack_from("<I", data, 8)
    assert version == 1
    assert data[12:44] == config_hash("cfg")
    assert struct.unpack_from("<I", data, 44)[0] == len(blocks)


def test_hash_mismatch(tmp_path, blocks):
    write_checkpoint(tmp_path / "c.ckpt", blocks, config_hash("a"))
    with pytest.raises(CheckpointError, match="hash"):
        read_checkpoint(tmp_path / "c.ckpt", config_hash("b"))


def test_corruption_detected(tmp_path, blocks):
    p = tmp_path / "c.ckpt"
    write_checkpoint(p, blocks, config_hash("a"))
    data = p.read_bytes()
    p.write_bytes(data[:-3])
    with pytest.raises(CheckpointError):
        read_checkpoint(p)
    p.write_bytes(data + b"\0")
    with pytest.raises(CheckpointError):
        read_checkpoint(p)
    p.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError):
        read_checkpoint(p)


def test_bytes_deterministic(tmp_path, blocks):
    write_checkpoint(tmp_path / "a.ckpt", blocks, config_hash("a"))
    write_checkpoint(tmp_path / "b.ckpt", dict(blocks), config_hash("a"))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
