"""Versioned binary container for named float64 arrays.

Layout (all integers little-endian)::

    magic        8 bytes   b"P2SCKPT\\0"
    version      uint32    currently 1
    config hash  32 bytes  SHA-256 of the model configuration
    n_blocks     uint32
    n_blocks times:
        name_len uint32, name (UTF-8, name_len bytes)
        rank     uint32, dims (rank x uint64)
        payload  prod(dims) x float64

Blocks are written in the order given, so identical inputs give identical
bytes.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"P2SCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def write_checkpoint(path, blocks: dict, cfg_hash: bytes):
    if len(cfg_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), cfg_hash, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path, expected_hash: bytes | None = None):
    """Return ``(blocks, config_hash)``; raises CheckpointError on any mismatch."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (version,) = struct.unpack_from("<I", data, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        h = data[12:44]
        if expected_hash is not None and h != expected_hash:
            raise CheckpointError(f"{path}: config hash mismatch (checkpoint belongs to a different configuration)")
        (n,) = struct.unpack_from("<I", data, 44)
        pos = 48
        blocks = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(data):
                raise CheckpointError(f"{path}: truncated block {name!r}")
            blocks[name] = np.frombuffer(data, "<f8", count, pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return blocks, h
