"""Tensor-archive ("STAR1") reader and writer.

Layout: the magic bytes ``STAR1`` followed by one record per tensor, records
sorted lexicographically by name::

    u32   name length (bytes)
    ...   UTF-8 name
    u8    dtype code
    u32   rank
    u64   dims[rank]
    ...   raw little-endian data, C order

All integers are little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"STAR1"

DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
}


class ArchiveError(ValueError):
    """Raised for malformed or unsupported tensor archives."""


def _dtype_code(arr: np.ndarray) -> int:
    for code, dt in DTYPE_CODES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return code
    raise ArchiveError(f"unsupported dtype {arr.dtype}; use float32, float64 or int64")


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _dtype_code(arr)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BI", code, arr.ndim))
        if arr.ndim:
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    if not data.startswith(MAGIC):
        raise ArchiveError("missing STAR1 magic")
    view = memoryview(data)
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ArchiveError("truncated archive")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    while pos < len(view):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5))
        if code not in DTYPE_CODES:
            raise ArchiveError(f"unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        dt = DTYPE_CODES[code]
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(bytes(take(count * dt.itemsize)), dtype=dt).reshape(shape)
        out[name] = arr.copy()
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
