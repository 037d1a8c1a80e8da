"""Flat binary snapshot format shared by backbone, PET, and map checkpoints.

Layout, all integers little-endian:
    8 bytes   magic b"BTSNAP01"
    u32       JSON header length, then that many UTF-8 bytes (header dict)
    u32       record count
    per record:
        u16   name length, then UTF-8 name
        u8    ndim, then ndim * u32 dims
        float64 data, row-major
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"BTSNAP01"


class SnapshotFormatError(ValueError):
    """File is not a snapshot or is truncated/corrupt."""


def save_snapshot(path, header: dict, tensors: dict) -> None:
    """tensors maps name -> ndarray; insertion order is preserved."""
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hdr)))
        f.write(hdr)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype("<f8").tobytes(order="C"))


def load_snapshot(path):
    """Returns (header dict, dict name -> float64 ndarray)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise SnapshotFormatError(f"{path}: bad magic bytes")
    off = 8

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise SnapshotFormatError(f"{path}: truncated at offset {off}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64)
    if off != len(blob):
        raise SnapshotFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return header, tensors
