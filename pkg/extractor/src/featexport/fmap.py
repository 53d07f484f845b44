"""FMAP container: magic "FMAP", u32 version=1, u32 H, u32 W, u32 M, then
H*W*M little-endian float32, row-major pixels with channels contiguous.

This module writes and validates the format directly so the exporter has
no dependency on the segmentation engine.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FMAP"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FmapError(ValueError):
    pass


def write_fmap(path, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 3:
        raise FmapError("feature data must be (H, W, M)")
    h, w, m = data.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, h, w, m))
        f.write(data.tobytes())


def read_fmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    info = validate_bytes(raw)
    h, w, m = info["height"], info["width"], info["dim"]
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, m).copy()


def validate_fmap(path) -> dict:
    """Header info for a well-formed file; raises FmapError (with the
    failing byte offset) otherwise."""
    return validate_bytes(Path(path).read_bytes())


def validate_bytes(raw: bytes) -> dict:
    if len(raw) < _HEADER.size:
        raise FmapError(f"truncated header: file ends at byte {len(raw)}")
    magic, version, h, w, m = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FmapError("bad magic at byte 0")
    if version != VERSION:
        raise FmapError(f"unsupported version {version} at byte 4")
    expected = _HEADER.size + 4 * h * w * m
    if len(raw) != expected:
        raise FmapError(f"payload ends at byte {len(raw)}, expected {expected}")
    return {"height": h, "width": w, "dim": m, "bytes": len(raw)}
