"""EZF1: the binary container for feature blocks, centroids and parameters.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"EZF1"
    4       4     version (u32, currently 1)
    8       4     record count R (u32)
    12      4     clip count N (u32)
    16      4     dimension D (u32)
    20      4RND  payload, float32 LE, (record, clip, dim) row-major
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import CorruptionError, FormatError

MAGIC = b"EZF1"
VERSION = 1
HEADER = struct.Struct("<4sIIII")
HEADER_SIZE = HEADER.size


def payload_nbytes(records: int, clips: int, dim: int) -> int:
    return 4 * records * clips * dim


def encode(block) -> bytes:
    """Serialise a ``(R, N, D)`` block; values are narrowed to float32."""
    arr = np.asarray(block)
    if arr.ndim != 3:
        raise FormatError(f"EZF1 blocks are 3-D (records, clips, dim), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError("EZF1 payload must be finite")
    R, N, D = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return HEADER.pack(MAGIC, VERSION, R, N, D) + payload


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse an EZF1 buffer into a float32 ``(R, N, D)`` array."""
    if len(buf) < HEADER_SIZE:
        raise CorruptionError(f"{source}: truncated header: expected {HEADER_SIZE} bytes, got {len(buf)}")
    magic, version, R, N, D = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported EZF1 version {version}")
    expected = payload_nbytes(R, N, D)
    actual = len(buf) - HEADER_SIZE
    if actual != expected:
        raise CorruptionError(
            f"{source}: payload length mismatch: expected {expected} bytes for R={R}, N={N}, D={D}, got {actual}"
        )
    return np.frombuffer(buf, dtype="<f4", count=R * N * D, offset=HEADER_SIZE).reshape(R, N, D).astype(np.float32)


def write_ezf(path: str | os.PathLike, block) -> None:
    data = encode(block)
    with open(path, "wb") as f:
        f.write(data)


def read_ezf(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    return decode(buf, source=os.fspath(path))


def read_header(path: str | os.PathLike) -> tuple[int, int, int]:
    """Return ``(R, N, D)`` after validating magic, version and byte length."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        head = f.read(HEADER_SIZE)
    if len(head) < HEADER_SIZE:
        raise CorruptionError(f"{path}: truncated header: expected {HEADER_SIZE} bytes, got {len(head)}")
    magic, version, R, N, D = HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported EZF1 version {version}")
    actual = os.path.getsize(path) - HEADER_SIZE
    if actual != payload_nbytes(R, N, D):
        raise CorruptionError(
            f"{path}: payload length mismatch: expected {payload_nbytes(R, N, D)} bytes, got {actual}"
        )
    return R, N, D
