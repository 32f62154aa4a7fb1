"""Binary tensor files and JSON manifests.

``WSVDMAT1``: 8 magic bytes, rows and cols as little-endian uint64, then
rows*cols little-endian float64 values in row-major order.

``WSVDINT8``: same header layout, followed by rows*cols int8 values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAT_MAGIC = b"WSVDMAT1"
INT8_MAGIC = b"WSVDINT8"
_HEADER = struct.Struct("<8sQQ")


class FormatError(ValueError):
    pass


def _write(path, magic: bytes, a: np.ndarray, dtype: str) -> None:
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    rows, cols = a.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, rows, cols))
        f.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def _read(path, magic: bytes, dtype: str) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    got, rows, cols = _HEADER.unpack_from(data)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    body = data[_HEADER.size:]
    itemsize = np.dtype(dtype).itemsize
    if len(body) != rows * cols * itemsize:
        raise FormatError(f"{path}: expected {rows * cols * itemsize} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(rows, cols).copy()


def save_matrix(path, m) -> None:
    a = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"refusing to write non-finite matrix to {path}")
    _write(path, MAT_MAGIC, a, "<f8")


def load_matrix(path) -> np.ndarray:
    return _read(path, MAT_MAGIC, "<f8").astype(np.float64)


def save_int8(path, q) -> None:
    q = np.asarray(q)
    if q.size and (q.min() < -128 or q.max() > 127):
        raise ValueError("values outside the int8 range")
    _write(path, INT8_MAGIC, q.astype(np.int8), "i1")


def load_int8(path) -> np.ndarray:
    return _read(path, INT8_MAGIC, "i1").astype(np.int64)


def dump_json(path, obj) -> None:
    """Write JSON with sorted keys and a trailing newline (byte-stable output)."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())
