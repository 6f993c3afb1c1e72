"""HTF1 tensor container.

Layout (little endian)::

    b"HTF1" | dtype:u8 | rank:u8 | reserved:2 bytes | dims: rank x u32 | payload

dtype 1 is float32 (the only code the rest of the package writes); 2 is
float64 and is read for completeness.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HTF1"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class TensorFormatError(ValueError):
    pass


def to_bytes(array: np.ndarray, dtype=np.float32) -> bytes:
    arr = np.asarray(array)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise TensorFormatError("rank too large")
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError("tensor contains non-finite values")
    header = MAGIC + struct.pack("<BB2x", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes(order="C")
    return header + payload


def from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - offset != count * dt.itemsize:
        raise TensorFormatError("payload size does not match dims")
    arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(dims)
    return arr.astype(dt.newbyteorder("="))


def save(path: str | Path, array: np.ndarray, dtype=np.float32):
    Path(path).write_bytes(to_bytes(array, dtype))


def load(path: str | Path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())

