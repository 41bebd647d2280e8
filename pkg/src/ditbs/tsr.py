"""TSR1 raw tensor files.

Layout (little-endian): ``b"TSR1"``, u8 dtype code, u8 rank, rank x u32
dims, then the row-major payload. Code 0 is float32 (the default); code 1
is float64 and only used for 64-bit verification runs.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"TSR1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    pass


def encoded_size(shape: tuple[int, ...], code: int = 0) -> int:
    return 6 + 4 * len(shape) + int(np.prod(shape, dtype=np.int64)) * DTYPES[code].itemsize


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in CODES:
        arr = arr.astype(np.float32)
    code = CODES[arr.dtype]
    if arr.ndim > 255:
        raise FormatError("rank too large for TSR1")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor at ``offset``; returns (array, offset after it)."""
    buf = memoryview(buf)
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise FormatError(f"bad TSR1 magic at byte {offset}")
    if len(buf) < offset + 6:
        raise FormatError("truncated TSR1 header")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in DTYPES:
        raise FormatError(f"unknown TSR1 dtype code {code}")
    pos = offset + 6
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dt = DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("truncated TSR1 payload")
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dt).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def read(f: BinaryIO) -> np.ndarray:
    head = f.read(6)
    if len(head) < 6 or head[:4] != MAGIC:
        raise FormatError("bad TSR1 magic")
    rank = head[5]
    dims = f.read(4 * rank)
    code = head[4]
    if code not in DTYPES:
        raise FormatError(f"unknown TSR1 dtype code {code}")
    shape = struct.unpack(f"<{rank}I", dims)
    payload = f.read(int(np.prod(shape, dtype=np.int64)) * DTYPES[code].itemsize)
    arr, _ = decode(head + dims + payload)
    return arr


def save(path: str | Path, arr: np.ndarray) -> None:
    from .runio import atomic_write_bytes

    atomic_write_bytes(Path(path), encode(arr))


def load(path: str | Path) -> np.ndarray:
    arr, end = decode(Path(path).read_bytes())
    return arr
