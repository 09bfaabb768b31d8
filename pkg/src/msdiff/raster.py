"""Binary raster files for images and sinograms.

Layout: a 32-byte little-endian header followed by row-major float32 values.

    offset  size  field
    0       4     magic b"MSDR"
    4       1     format version (1)
    5       1     dtype tag (1 = float32)
    6       2     kind (0 = image, 1 = sinogram)
    8       4     rows (views for sinograms)
    12      4     cols (detector elements for sinograms)
    16      8     pixel size (float64; detector pitch for sinograms)
    24      8     reserved, must be zero
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

MAGIC = b"MSDR"
VERSION = 1
DTYPE_FLOAT32 = 1
MAX_ELEMENTS = 1 << 28

_HEADER = struct.Struct("<4sBBHIIdQ")
assert _HEADER.size == 32


class RasterFormatError(ValueError):
    pass


class RasterKind(IntEnum):
    IMAGE = 0
    SINOGRAM = 1


@dataclass
class Raster:
    values: np.ndarray
    pixel_size: float
    kind: RasterKind = RasterKind.IMAGE

    @property
    def shape(self):
        return self.values.shape


def encode_raster(raster: Raster) -> bytes:
    values = np.asarray(raster.values)
    if values.ndim != 2:
        raise RasterFormatError(f"raster must be 2-D, got shape {values.shape}")
    rows, cols = values.shape
    if rows * cols > MAX_ELEMENTS:
        raise RasterFormatError(f"raster of {rows}x{cols} exceeds the element limit")
    header = _HEADER.pack(
        MAGIC, VERSION, DTYPE_FLOAT32, int(raster.kind), rows, cols, float(raster.pixel_size), 0
    )
    return header + values.astype("<f4").tobytes(order="C")


def decode_raster(data: bytes) -> Raster:
    if len(data) < _HEADER.size:
        raise RasterFormatError("file is shorter than the raster header")
    magic, version, dtype, kind, rows, cols, pixel_size, reserved = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise RasterFormatError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise RasterFormatError(f"unsupported raster version {version}")
    if dtype != DTYPE_FLOAT32:
        raise RasterFormatError(f"unsupported dtype tag {dtype}")
    if kind not in RasterKind.__members__.values():
        raise RasterFormatError(f"unknown raster kind {kind}")
    if reserved != 0:
        raise RasterFormatError("reserved header field is not zero")
    if rows * cols > MAX_ELEMENTS:
        raise RasterFormatError(f"dimensions {rows}x{cols} overflow the element limit")
    expected = _HEADER.size + 4 * rows * cols
    if len(data) < expected:
        raise RasterFormatError(f"truncated payload: {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise RasterFormatError(f"{len(data) - expected} trailing bytes after payload")
    values = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=_HEADER.size)
    return Raster(values.reshape(rows, cols).astype(np.float32), pixel_size, RasterKind(kind))


def save_raster(path, raster: Raster) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_raster(raster))


def load_raster(path) -> Raster:
    return decode_raster(Path(path).read_bytes())
