"""Flat binary slice format.

Layout (little-endian)::

    offset  size  field
    0       4     magic b"CDIF"
    4       2     version (u16, currently 1)
    6       2     dtype tag (u16, 1 = float32)
    8       4     H (u32)
    12      4     W (u32)
    16      4*H*W row-major float32 pixel values in HU
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CDIF"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sHHII")


class FormatError(ValueError):
    pass


def write_slice(path, img) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, h, w))
        f.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_slice(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dtype, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype tag {dtype}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * h * w:
        raise FormatError(f"{path}: expected {4 * h * w} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)
