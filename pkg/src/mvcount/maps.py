"""Single-channel/multi-channel raster maps shared by all modules.

A :class:`Map2D` is a stack of ``channels`` real-valued rasters of shape
``(height, width)`` plus a per-cell validity mask and a free-form grid tag
("ground" for the scene grid, "cam:<id>" for a camera's image raster,
optionally suffixed for reduced-resolution rasters).

Binary format (".mv2d"):
  * 16-byte header: magic ``MV2D``, then little-endian u16 width, u16 height,
    u16 channels, u16 flags, 4 reserved zero bytes.  Flag bit 0 is set for
    ground-grid maps.
  * channel values as little-endian float32, row-major, channel by channel.
  * validity bitmask, row-major, 8 cells per byte, MSB first.

The grid tag's camera id is not stored; readers recover it from context
(conventionally the file name).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MV2D"
FLAG_GROUND = 0x0001

GROUND_TAG = "ground"


@dataclass
class Map2D:
    """A raster with grid metadata and a validity mask."""

    values: np.ndarray  # (channels, height, width) float64
    valid: np.ndarray  # (height, width) bool
    tag: str = GROUND_TAG
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.values.ndim != 3:
            raise ValueError(f"values must be 2-D or 3-D, got shape {self.values.shape}")
        if self.valid is None:
            self.valid = np.ones(self.values.shape[1:], dtype=bool)
        self.valid = np.ascontiguousarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape[1:]:
            raise ValueError(
                f"valid mask shape {self.valid.shape} does not match raster {self.values.shape[1:]}"
            )

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def plane(self, c: int = 0) -> np.ndarray:
        """One channel as a (height, width) array."""
        return self.values[c]

    def total(self) -> float:
        """Sum of all values (invalid cells hold zeros by construction)."""
        return float(self.values.sum())

    def copy(self) -> "Map2D":
        return Map2D(self.values.copy(), self.valid.copy(), self.tag, dict(self.meta))


def zeros_like_grid(height: int, width: int, channels: int = 1, tag: str = GROUND_TAG) -> Map2D:
    return Map2D(np.zeros((channels, height, width)), np.ones((height, width), bool), tag)


def _pack_mask(valid: np.ndarray) -> bytes:
    bits = np.packbits(valid.astype(np.uint8).ravel(), bitorder="big")
    return bits.tobytes()


def _unpack_mask(raw: bytes, height: int, width: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="big")
    return bits[: height * width].astype(bool).reshape(height, width)


def write_map(path, m: Map2D) -> None:
    """Serialize to the .mv2d binary format."""
    if m.width > 0xFFFF or m.height > 0xFFFF or m.channels > 0xFFFF:
        raise ValueError("raster too large for the mv2d header")
    flags = FLAG_GROUND if m.tag == GROUND_TAG else 0
    header = MAGIC + struct.pack("<HHHH", m.width, m.height, m.channels, flags) + b"\x00" * 4
    body = m.values.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)
        f.write(_pack_mask(m.valid))


def read_map(path, tag: str | None = None) -> Map2D:
    """Load a .mv2d file; `tag` overrides the flag-derived default."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an mv2d file")
    width, height, channels, flags = struct.unpack("<HHHH", raw[4:12])
    n = width * height * channels
    end = 16 + 4 * n
    values = np.frombuffer(raw[16:end], dtype="<f4").astype(np.float64)
    values = values.reshape(channels, height, width)
    nbytes = (height * width + 7) // 8
    valid = _unpack_mask(raw[end : end + nbytes], height, width)
    if tag is None:
        tag = GROUND_TAG if flags & FLAG_GROUND else "cam:?"
    return Map2D(values, valid, tag)


def write_pgm(path, plane: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """Export one raster plane as a binary PGM (P5) for visual inspection."""
    plane = np.asarray(plane, dtype=np.float64)
    if lo is None:
        lo = float(plane.min()) if plane.size else 0.0
    if hi is None:
        hi = float(plane.max()) if plane.size else 1.0
    span = hi - lo
    if span <= 0:
        span = 1.0
    img = np.clip((plane - lo) / span * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{plane.shape[1]} {plane.shape[0]}\n255\n".encode())
        f.write(img.tobytes())
