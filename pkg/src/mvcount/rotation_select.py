"""Rotation-selection layer: per-cell convolution with rotated kernels.

The average-height projection stretches features along the view ray, so tall
kernels are rotated to follow the per-cell ray direction.  Angles use the
same convention as the geometry module: degrees clockwise from +y with x
right / y up on the ground plane.  On the stored grid raster (rows run along
-y) a rotation by theta maps relative index offsets (dc, dr) through
[[cos, -sin], [sin, cos]]; content rotation gathers from the inverse.

Kernels are zero-padded to the square size ceil(sqrt(2) * max(k1, k2)),
rounded up to odd, so any rotation fits; rotation itself is bilinear
resampling about the center and is exact for multiples of 90 degrees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .maps import Map2D


@dataclass(frozen=True)
class RotationConfig:
    k1: int = 5  # kernel height (tall axis, aligned with the view ray)
    k2: int = 3  # kernel width
    q: float = 45.0  # quantization step, degrees

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("kernel dims must be at least 1")
        if not 0 < self.q <= 360:
            raise ValueError("quantization step must be in (0, 360]")

    @property
    def padded_size(self) -> int:
        p = int(np.ceil(np.sqrt(2.0) * max(self.k1, self.k2)))
        return p if p % 2 == 1 else p + 1


@dataclass
class RotationMasks:
    """Quantized view-ray angles and their indicator masks for one camera."""

    cam_id: str
    quantized: np.ndarray  # (H, W) degrees, multiples of q
    angles: np.ndarray  # sorted distinct angles present on valid cells
    masks: np.ndarray  # (len(angles), H, W) bool, partition of valid cells
    valid: np.ndarray  # (H, W) bool


def quantize_angle_map(angle_map: Map2D, q: float, cam_id: str = "?") -> RotationMasks:
    """Round each cell's angle to the nearest multiple of q (mod 360)."""
    ang = angle_map.plane()
    quant = (np.round(ang / q) * q) % 360.0
    quant = np.where(angle_map.valid, quant, -1.0)
    angles = np.unique(quant[angle_map.valid]) if angle_map.valid.any() else np.zeros(0)
    masks = np.stack([quant == a for a in angles]) if len(angles) else np.zeros((0,) + quant.shape, bool)
    return RotationMasks(cam_id, quant, angles, masks, angle_map.valid.copy())


def _rotation_plan(angle_degrees: float, size: int):
    """Gather plan for rotating a size x size raster about its center."""
    th = np.radians(angle_degrees)
    ct, st = np.cos(th), np.sin(th)
    half = (size - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    qr, qc = rr - half, cc - half
    src_c = ct * qc + st * qr + half
    src_r = -st * qc + ct * qr + half
    return np.ascontiguousarray(src_r), np.ascontiguousarray(src_c)


def pad_kernel(kernel: np.ndarray, size: int) -> np.ndarray:
    """Center a (..., k1, k2) kernel in a (..., size, size) zero square."""
    k1, k2 = kernel.shape[-2:]
    if k1 > size or k2 > size:
        raise ValueError("kernel larger than the padded square")
    out = np.zeros(kernel.shape[:-2] + (size, size))
    r0, c0 = (size - k1) // 2, (size - k2) // 2
    out[..., r0 : r0 + k1, c0 : c0 + k2] = kernel
    return out


def crop_kernel(padded: np.ndarray, k1: int, k2: int) -> np.ndarray:
    size = padded.shape[-1]
    r0, c0 = (size - k1) // 2, (size - k2) // 2
    return padded[..., r0 : r0 + k1, c0 : c0 + k2]


def rotate_kernel(kernel: np.ndarray, angle_degrees: float, config: RotationConfig) -> np.ndarray:
    """Zero-pad to the config's square size, then rotate about the center.

    Accepts a (k1, k2) kernel or a (..., k1, k2) stack; 0 degrees returns the
    padded kernel exactly.
    """
    size = config.padded_size
    padded = pad_kernel(np.asarray(kernel, dtype=np.float64), size)
    rows, cols = _rotation_plan(angle_degrees, size)
    valid = np.ones((size, size), dtype=np.uint8)
    flat = padded.reshape(-1, size, size)
    out = _kernels.bilinear_gather(np.ascontiguousarray(flat), rows, cols, valid)
    return out.reshape(padded.shape)


def rotate_kernel_adjoint(grad_padded: np.ndarray, angle_degrees: float, config: RotationConfig) -> np.ndarray:
    """Transpose of :func:`rotate_kernel`, cropped back to (k1, k2)."""
    size = config.padded_size
    rows, cols = _rotation_plan(angle_degrees, size)
    valid = np.ones((size, size), dtype=np.uint8)
    flat = np.ascontiguousarray(grad_padded, dtype=np.float64).reshape(-1, size, size)
    g = _kernels.bilinear_scatter(flat, rows, cols, valid, size, size)
    g = g.reshape(grad_padded.shape)
    return crop_kernel(g, config.k1, config.k2)


def rotate_raster(values: np.ndarray, angle_degrees: float) -> np.ndarray:
    """Rotate (C, H, W) map content about the raster center (same convention
    as kernel rotation); used by the equivariance checks and visualizations."""
    values = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    if values.ndim == 2:
        values = values[None]
    h, w = values.shape[-2:]
    if h != w:
        raise ValueError("rotate_raster expects a square raster")
    rows, cols = _rotation_plan(angle_degrees, h)
    return _kernels.bilinear_gather(values, rows, cols, np.ones((h, w), np.uint8))


def rotation_select_layer(features: Map2D, kernels: np.ndarray, masks: RotationMasks, config: RotationConfig):
    """F = sum_i 1(r = r_i) (x) (features * rotate(kernels, r_i)).

    `kernels` has shape (C_out, C_in, k1, k2); convolution is same-size with
    zero padding.  Returns (output map, cache) where the cache feeds
    :func:`rotation_select_backward`.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    cout, cin = kernels.shape[:2]
    if kernels.shape[2:] != (config.k1, config.k2):
        raise ValueError(f"kernel dims {kernels.shape[2:]} do not match config ({config.k1}, {config.k2})")
    if features.channels != cin:
        raise ValueError(f"feature channels {features.channels} do not match kernels ({cin})")
    if masks.valid.shape != (features.height, features.width):
        raise ValueError("masks were built for a different raster")
    out = np.zeros((cout, features.height, features.width))
    rotated = []
    for angle, mask in zip(masks.angles, masks.masks):
        wk = rotate_kernel(kernels, float(angle), config)
        fi = _kernels.conv2d_fwd(features.values, np.ascontiguousarray(wk))
        out += fi * mask[None]
        rotated.append(wk)
    cache = {"features": features.values, "rotated": rotated, "masks": masks, "config": config, "cout": cout}
    result = Map2D(out, features.valid & masks.valid, tag=features.tag)
    return result, cache


def rotation_select_backward(cache: dict, dout: np.ndarray):
    """Gradients w.r.t. the input features and the unrotated kernels."""
    config: RotationConfig = cache["config"]
    masks: RotationMasks = cache["masks"]
    x = cache["features"]
    size = config.padded_size
    dx = np.zeros_like(x)
    dk = np.zeros((cache["cout"], x.shape[0], config.k1, config.k2))
    for angle, mask, wk in zip(masks.angles, masks.masks, cache["rotated"]):
        dfi = np.ascontiguousarray(dout * mask[None])
        dx += _kernels.conv2d_bwd_x(dfi, wk)
        dwk = _kernels.conv2d_bwd_w(x, dfi, size, size)
        dk += rotate_kernel_adjoint(dwk, float(angle), config)
    return dx, dk
