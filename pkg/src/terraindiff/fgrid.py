"""Bit-exact binary raster format (FGRID) and 8-bit PGM preview export.

FGRID layout, all little-endian:

    bytes 0-3    magic "FGRD"
    bytes 4-5    version, uint16 (currently 1)
    bytes 6-9    width, uint32
    bytes 10-13  height, uint32
    bytes 14-37  origin x0, origin y0, pixel_size as three float64
    bytes 38-    height*width float32 values, row-major, top row first

Nodata is encoded as quiet NaN.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grid import Grid

MAGIC = b"FGRD"
VERSION = 1
_HEADER = struct.Struct("<4sHIIddd")


def write_fgrid(path: str | Path, grid: Grid) -> None:
    values = np.ascontiguousarray(grid.values, dtype="<f4")
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        grid.width,
        grid.height,
        float(grid.origin[0]),
        float(grid.origin[1]),
        float(grid.pixel_size),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes())


def read_fgrid(path: str | Path) -> Grid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, width, height, x0, y0, pixel_size = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not an FGRID file (magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported FGRID version {version}")
    expected = _HEADER.size + 4 * width * height
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(height, width)
    return Grid(values, pixel_size=pixel_size, origin=(x0, y0))


def write_pgm(path: str | Path, grid: Grid) -> None:
    """8-bit binary PGM preview, min-max stretched over valid pixels.

    Invalid pixels render as 0.
    """
    v = grid.values.astype(np.float64)
    finite = np.isfinite(v)
    if finite.any():
        lo = v[finite].min()
        hi = v[finite].max()
        span = hi - lo if hi > lo else 1.0
        scaled = np.clip((v - lo) / span * 255.0, 0.0, 255.0)
    else:
        scaled = np.zeros_like(v)
    img = np.where(finite, scaled, 0.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
