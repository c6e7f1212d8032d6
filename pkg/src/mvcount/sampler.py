"""Bilinear resampling of rasters along a correspondence field.

``sample`` pulls source values onto the field's target grid; it is linear in
the source, zero-pads out-of-bounds reads, and masks invalid target cells.
``sample_adjoint`` is its exact transpose, which is what routes fusion-stage
gradients back into the per-view backbones.  Field coordinates themselves are
fixed by calibration and carry no gradients.

Bilinear resizing (used for pyramid up/down paths) is built on the same
kernels: coordinates are precomputed and clamped to the source bounds, so the
resize adjoint is again an exact transpose.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .geometry import CorrespondenceField
from .maps import Map2D


def _as_field_arrays(field: CorrespondenceField):
    rows = np.ascontiguousarray(field.rows, dtype=np.float64)
    cols = np.ascontiguousarray(field.cols, dtype=np.float64)
    valid = np.ascontiguousarray(field.valid, dtype=np.uint8)
    return rows, cols, valid


def sample(source: Map2D, field: CorrespondenceField) -> Map2D:
    """Resample `source` at the field's continuous coordinates."""
    if source.tag != field.source_tag:
        raise ValueError(f"grid tag mismatch: map {source.tag!r} vs field {field.source_tag!r}")
    rows, cols, valid = _as_field_arrays(field)
    values = _kernels.bilinear_gather(source.values, rows, cols, valid)
    return Map2D(values, field.valid.copy(), tag=field.target_tag)


def sample_adjoint(upstream: Map2D, field: CorrespondenceField, source_height: int, source_width: int) -> Map2D:
    """Transpose of :func:`sample`: push target-grid gradients to the source."""
    if upstream.tag != field.target_tag:
        raise ValueError(f"grid tag mismatch: map {upstream.tag!r} vs field {field.target_tag!r}")
    if upstream.valid.shape != field.target_shape:
        raise ValueError("upstream shape does not match the field target")
    rows, cols, valid = _as_field_arrays(field)
    values = _kernels.bilinear_scatter(upstream.values, rows, cols, valid, source_height, source_width)
    return Map2D(values, np.ones((source_height, source_width), bool), tag=field.source_tag)


def sample_array(values: np.ndarray, field: CorrespondenceField) -> np.ndarray:
    """Raw-array variant of :func:`sample` (no tag checking)."""
    rows, cols, valid = _as_field_arrays(field)
    return _kernels.bilinear_gather(np.ascontiguousarray(values, dtype=np.float64), rows, cols, valid)


def sample_array_adjoint(grad: np.ndarray, field: CorrespondenceField, source_height: int, source_width: int) -> np.ndarray:
    rows, cols, valid = _as_field_arrays(field)
    return _kernels.bilinear_scatter(
        np.ascontiguousarray(grad, dtype=np.float64), rows, cols, valid, source_height, source_width
    )


class BilinearResize:
    """Reusable bilinear resize plan between two raster sizes.

    Target pixel centers map to source coordinates with the half-pixel
    convention ``s = (t + 0.5) * size_ratio - 0.5`` and are clamped to the
    source bounds, so constants are preserved and the adjoint is exact.
    """

    def __init__(self, src_h: int, src_w: int, dst_h: int, dst_w: int):
        self.src_h, self.src_w = src_h, src_w
        self.dst_h, self.dst_w = dst_h, dst_w
        r = (np.arange(dst_h) + 0.5) * (src_h / dst_h) - 0.5
        c = (np.arange(dst_w) + 0.5) * (src_w / dst_w) - 0.5
        r = np.clip(r, 0.0, src_h - 1.0)
        c = np.clip(c, 0.0, src_w - 1.0)
        self.rows = np.ascontiguousarray(np.broadcast_to(r[:, None], (dst_h, dst_w)))
        self.cols = np.ascontiguousarray(np.broadcast_to(c[None, :], (dst_h, dst_w)))
        self.valid = np.ones((dst_h, dst_w), dtype=np.uint8)

    def forward(self, values: np.ndarray) -> np.ndarray:
        return _kernels.bilinear_gather(np.ascontiguousarray(values, dtype=np.float64), self.rows, self.cols, self.valid)

    def adjoint(self, grad: np.ndarray) -> np.ndarray:
        return _kernels.bilinear_scatter(
            np.ascontiguousarray(grad, dtype=np.float64), self.rows, self.cols, self.valid, self.src_h, self.src_w
        )


class AreaReduce:
    """Anti-aliased (area-average) downsampling plan, separable and linear.

    Each target cell averages the source interval it covers; weight rows sum
    to one, so constants survive exactly for integer ratios.
    """

    def __init__(self, src_h: int, src_w: int, dst_h: int, dst_w: int):
        self.src_h, self.src_w = src_h, src_w
        self.dst_h, self.dst_w = dst_h, dst_w
        self.wr = self._weights(src_h, dst_h)
        self.wc = self._weights(src_w, dst_w)

    @staticmethod
    def _weights(n_src: int, n_dst: int) -> np.ndarray:
        scale = n_src / n_dst
        w = np.zeros((n_dst, n_src))
        for i in range(n_dst):
            lo, hi = i * scale, (i + 1) * scale
            j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
            for j in range(j0, min(j1, n_src)):
                overlap = min(hi, j + 1) - max(lo, j)
                if overlap > 0:
                    w[i, j] = overlap / scale
        return w

    def forward(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("ij,cjk,lk->cil", self.wr, np.asarray(values, dtype=np.float64), self.wc, optimize=True)

    def adjoint(self, grad: np.ndarray) -> np.ndarray:
        return np.einsum("ij,cil,lk->cjk", self.wr, np.asarray(grad, dtype=np.float64), self.wc, optimize=True)
