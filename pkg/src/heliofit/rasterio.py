"""Binary float-texture container used for all raster assets (maps, bases, buffers).

Layout: 16-byte header (magic ``SSTX``, u32 width, u32 height, u32 channels,
little-endian) followed by row-major float32 samples, channels interleaved.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSTX"
_HEADER = struct.Struct("<4sIII")


class RasterFormatError(ValueError):
    pass


def write_raster(path: str | Path, data: np.ndarray) -> None:
    """Write a (H, W) or (H, W, C) float array as an SSTX file."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise RasterFormatError(f"expected 2D or 3D array, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, w, h, c))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    """Read an SSTX file into an (H, W, C) float32 array."""
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise RasterFormatError(f"{path}: truncated header")
        magic, w, h, c = _HEADER.unpack(header)
        if magic != MAGIC:
            raise RasterFormatError(f"{path}: bad magic {magic!r}")
        payload = f.read(4 * w * h * c)
    if len(payload) != 4 * w * h * c:
        raise RasterFormatError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()
