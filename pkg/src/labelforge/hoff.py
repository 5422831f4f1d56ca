"""HOFF on-disk tensor format.

A .hoff file stores a single dense tensor:

    magic   4 bytes  b"HOFF"
    version u32      1
    dtype   u8       0 = uint8, 1 = float32 (little-endian)
    ndim    u32
    dims    u32 * ndim
    payload row-major element bytes

All header integers are little-endian. A *container* is a directory of
.hoff files plus an optional plain-text manifest; checkpoint helpers for
that live in the modules that own the checkpoints.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HOFF"
VERSION = 1

_DTYPE_CODES = {0: np.dtype(np.uint8), 1: np.dtype("<f4")}
_CODE_FOR_KIND = {"u1": 0, "f4": 1}


def write(path: str | Path, array: np.ndarray) -> None:
    """Write `array` as a HOFF tensor file. Accepts uint8 or float32 data
    (float64 input is cast down to float32)."""
    arr = np.asarray(array)
    if arr.dtype == np.uint8:
        code = 0
        payload = np.ascontiguousarray(arr)
    elif arr.dtype in (np.float32, np.float64):
        code = 1
        payload = np.ascontiguousarray(arr, dtype="<f4")
    else:
        raise ValueError(f"unsupported dtype for HOFF: {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > 4:
        raise ValueError(f"HOFF supports 1-4 dims, got ndim={arr.ndim}")
    header = MAGIC + struct.pack("<IBI", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read(path: str | Path) -> np.ndarray:
    """Read a HOFF tensor file back into a numpy array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, code, ndim = struct.unpack_from("<IBI", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported HOFF version {version}")
    if code not in _DTYPE_CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise ValueError(f"{path}: bad ndim {ndim}")
    offset = 4 + 9
    dims = struct.unpack_from(f"<{ndim}I", raw, offset)
    offset += 4 * ndim
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims))
    expected = count * dtype.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload length {len(payload)} != {expected} for dims {dims}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
