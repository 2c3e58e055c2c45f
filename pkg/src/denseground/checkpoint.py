"""Versioned binary container of named float64 parameter tensors.

Layout: magic, u32 format version, length-prefixed canonical-JSON metadata,
then the tensors sorted by name (u16 name length, name, u8 ndim, u32 dims,
row-major float64 payload). Everything little-endian, so identical
parameters always produce identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"DGCKPT\x00\n"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, tensors: dict, metadata: dict | None = None):
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        names = sorted(tensors)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def load_checkpoint(path: str):
    """Return (tensors dict, metadata dict); rejects foreign or newer files."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError("truncated checkpoint file")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = struct.unpack("<I", take(4))[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    meta_len = struct.unpack("<Q", take(8))[0]
    metadata = json.loads(take(meta_len).decode("utf-8"))
    count = struct.unpack("<I", take(4))[0]
    tensors = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2))[0]
        name = take(name_len).decode("utf-8")
        ndim = struct.unpack("<B", take(1))[0]
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * n_items), dtype="<f8").reshape(shape).copy()
        tensors[name] = data
    if off != len(blob):
        raise CheckpointError("trailing bytes after the last tensor")
    return tensors, metadata
