"""Minimal binary tensor file: magic "NDB1", dtype code, rank, extents, payload.

Layout (little-endian): 4-byte magic ``NDB1``, u8 dtype code (0 = float64),
u8 ndim, ndim x u64 extents, then the row-major payload.  Round-trips are
bit-exact; every tensor written by this package uses this format.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = ["write_ndbin", "read_ndbin", "NdbinError"]

MAGIC = b"NDB1"
DTYPE_F64 = 0


class NdbinError(ValueError):
    """Corrupt or unsupported ndbin file."""


def write_ndbin(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", DTYPE_F64, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_ndbin(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise NdbinError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 6:
        raise NdbinError(f"{path}: truncated header")
    dtype_code, ndim = struct.unpack_from("<BB", blob, 4)
    if dtype_code != DTYPE_F64:
        raise NdbinError(f"{path}: unsupported dtype code {dtype_code}")
    header_end = 6 + 8 * ndim
    if len(blob) < header_end:
        raise NdbinError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{ndim}Q", blob, 6)
    expected = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
    payload = blob[header_end:]
    if len(payload) != expected:
        raise NdbinError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
