"""GCR1 raster serialization, independent of the scoring engine.

Byte layout (little-endian): magic "GCR1", u32 width, u32 height,
u32 channels, u8 has_mask, float32 data row-major channel-interleaved,
then one mask byte (0/1) per pixel when has_mask is set.  The scoring
engine consumes these files as-is; this module exists so the exporter has
no code dependency on it.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"GCR1"
_HEADER = struct.Struct("<4sIIIB")


class GcrError(Exception):
    pass


def write_gcr(path, data: np.ndarray, mask: Optional[np.ndarray] = None) -> None:
    """Write (H, W) or (H, W, C) float data with an optional (H, W) mask."""
    path = Path(path)
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 2):
        raise GcrError(f"raster must be (H, W, 1|2), got shape {arr.shape}")
    h, w, c = arr.shape
    blob = _HEADER.pack(MAGIC, w, h, c, int(mask is not None))
    blob += np.ascontiguousarray(arr).tobytes()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h, w):
            raise GcrError(f"mask shape {mask.shape} does not match raster {(h, w)}")
        blob += mask.astype(np.uint8).tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_gcr(path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Read a GCR1 file; returns (data (H, W, C) float32, mask or None)."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise GcrError(f"{path}: truncated header")
    magic, w, h, c, has_mask = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise GcrError(f"{path}: bad magic {magic!r}")
    n = w * h
    expected = _HEADER.size + 4 * n * c + (n if has_mask else 0)
    if len(blob) != expected:
        raise GcrError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", count=n * c, offset=_HEADER.size).reshape(h, w, c).copy()
    mask = None
    if has_mask:
        raw = np.frombuffer(blob, dtype=np.uint8, count=n, offset=_HEADER.size + 4 * n * c)
        mask = raw.reshape(h, w).astype(bool)
    return data, mask
