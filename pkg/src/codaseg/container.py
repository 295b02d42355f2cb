"""Bit-exact little-endian tensor files.

Layout::

    b"CDAT" | u32 version (=1) | u8 dtype | u8 rank | rank x u32 extents | payload

dtype codes: 0=f32, 1=i32, 2=u8, 3=f64. Payload is raw row-major, no padding.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"CDAT"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("u1"), 3: np.dtype("<f8")}
CODE_OF = {np.dtype(v).newbyteorder("="): k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    key = arr.dtype.newbyteorder("=")
    if key not in CODE_OF:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    code = CODE_OF[key]
    if arr.ndim > 255:
        raise ValueError("rank too large")
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    if len(buf) < 10:
        raise FormatError(f"truncated header: expected 10 bytes, got {len(buf)}", len(buf))
    version, code, rank = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", 8)
    ext_end = 10 + 4 * rank
    if len(buf) < ext_end:
        raise FormatError(f"truncated extents: expected {ext_end} bytes, got {len(buf)}", len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, 10)
    dt = DTYPE_CODES[code]
    expected = ext_end + int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) != expected:
        kind = "truncated payload" if len(buf) < expected else "trailing bytes after payload"
        raise FormatError(f"{kind}: expected {expected} bytes, got {len(buf)}", min(len(buf), expected))
    arr = np.frombuffer(buf, dtype=dt, offset=ext_end, count=int(np.prod(shape, dtype=np.int64)))
    return arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)


def write_tensor(t, path: str | os.PathLike) -> None:
    data = t.data if hasattr(t, "data") and not isinstance(t, np.ndarray) else t
    with open(path, "wb") as fh:
        fh.write(encode(data))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
