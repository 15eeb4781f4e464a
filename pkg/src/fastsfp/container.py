"""Flat little-endian binary container used for layers, encoders and volumes.

Layout: 4-byte ASCII magic, uint32 count of header integers, that many int64
header values, then raw float64 payload.  All fields little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DimensionError

_F8 = np.dtype("<f8")


def pack(magic: bytes, header: Sequence[int], arrays: Sequence[np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    parts = [magic, struct.pack("<I", len(header)), struct.pack("<%dq" % len(header), *header)]
    parts.extend(np.ascontiguousarray(a, dtype=_F8).tobytes() for a in arrays)
    return b"".join(parts)


def unpack(blob: bytes, magic: bytes) -> tuple[list[int], np.ndarray]:
    """Return ``(header, payload)``; ``payload`` is a flat float64 array."""
    if blob[:4] != magic:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    (n,) = struct.unpack_from("<I", blob, 4)
    header = list(struct.unpack_from("<%dq" % n, blob, 8))
    offset = 8 + 8 * n
    if (len(blob) - offset) % 8:
        raise DimensionError("payload is not a whole number of float64 values")
    payload = np.frombuffer(blob, dtype=_F8, offset=offset).astype(np.float64)
    return header, payload


def take(payload: np.ndarray, offset: int, shape: tuple[int, ...]) -> tuple[np.ndarray, int]:
    """Slice the next ``prod(shape)`` values off ``payload``."""
    n = int(np.prod(shape, dtype=np.int64))
    if offset + n > payload.size:
        raise DimensionError("container payload is truncated")
    return payload[offset:offset + n].reshape(shape).copy(), offset + n


def write_file(path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def read_file(path) -> bytes:
    return Path(path).read_bytes()
