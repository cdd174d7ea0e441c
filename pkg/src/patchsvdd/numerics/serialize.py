"""Flat binary container for named tensors.

Layout (little-endian)::

    b"PSVD" | version u32 | count u32
    per tensor: name_len u32 | name utf-8 | dtype u8 | rank u32 | extents u32*rank | values

``dtype`` is 0 for float32, 1 for float64.
"""
from __future__ import annotations

import io
import struct
from typing import Dict, Mapping

import numpy as np

MAGIC = b"PSVD"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise FormatError("not a PSVD container")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported PSVD version {version}")
    pos = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        code, rank = struct.unpack_from("<BI", blob, pos)
        pos += 5
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(dumps(tensors))


def load(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())
