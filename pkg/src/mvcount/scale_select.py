"""Distance-driven scale selection over image pyramids.

The pyramid uses an inter-scale downsampling ratio ``zoom`` > 1 (a 3-level
pyramid with zoom 2 matches a per-level resize factor of 0.5).  With that
convention the selected scale for a pixel at distance d is

    S = S_r - floor(log_zoom(d / d_r))          (fixed, discrete)
    S = b + k * log_zoom(d / d_r)               (learnable, soft)

so pixels farther than the reference distance select smaller indices (finer
pyramid levels), keeping apparent object sizes consistent: if the object's
height halves at double distance, dropping one zoom-2 level restores it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .maps import Map2D
from .sampler import AreaReduce, BilinearResize


@dataclass(frozen=True)
class PyramidConfig:
    n_scales: int = 3
    zoom: float = 2.0  # inter-scale downsampling ratio, > 1
    ref_scale: int = 1  # S_r
    ref_distance: float = 1.0  # d_r, mm

    def __post_init__(self):
        if self.n_scales < 1:
            raise ValueError("n_scales must be at least 1")
        if self.zoom <= 1.0:
            raise ValueError("zoom must exceed 1 (downsampling ratio between levels)")
        if not 0 <= self.ref_scale <= self.n_scales - 1:
            raise ValueError("ref_scale out of range")
        if self.ref_distance <= 0:
            raise ValueError("ref_distance must be positive")

    def with_reference(self, ref_distance: float) -> "PyramidConfig":
        return PyramidConfig(self.n_scales, self.zoom, self.ref_scale, ref_distance)


@dataclass
class LearnableScaleParams:
    """Trainable reference offset b and distance slope k (init: fixed-selection behavior)."""

    b: float
    k: float = -1.0


@dataclass
class ScaleMasks:
    """Per-pixel scale assignment: discrete index map or soft partition of unity."""

    indices: np.ndarray | None  # (H, W) int, or None for soft masks
    soft: np.ndarray | None  # (n, H, W) in [0, 1] summing to 1, or None
    valid: np.ndarray  # (H, W) bool

    @property
    def n_scales(self) -> int:
        return int(self.soft.shape[0]) if self.soft is not None else int(self.indices.max()) + 1

    def as_soft(self, n_scales: int) -> np.ndarray:
        if self.soft is not None:
            return self.soft
        return np.stack([(self.indices == i) & self.valid for i in range(n_scales)]).astype(np.float64)


def level_size(size: int, zoom: float, level: int) -> int:
    return int(round(size / zoom**level))


def build_pyramid(source: Map2D, config: PyramidConfig) -> list:
    """Levels 0..n-1: area-average downsample by zoom^i, then bilinear
    upsample back to the source size.  Level 0 is the source itself."""
    h, w = source.height, source.width
    out = [source]
    for i in range(1, config.n_scales):
        hi, wi = level_size(h, config.zoom, i), level_size(w, config.zoom, i)
        if hi < 4 or wi < 4:
            raise ValueError(f"map {h}x{w} too small for {config.n_scales} scales at zoom {config.zoom}")
        reduced = AreaReduce(h, w, hi, wi).forward(source.values)
        up = BilinearResize(hi, wi, h, w).forward(reduced)
        out.append(Map2D(up, source.valid.copy(), tag=source.tag))
    return out


def pyramid_reduce(source: Map2D, config: PyramidConfig, level: int) -> Map2D:
    """The raw downsampled level (before upsampling), for size measurements
    and for running feature extractors on the reduced rasters."""
    h, w = source.height, source.width
    if level == 0:
        return source.copy()
    hi, wi = level_size(h, config.zoom, level), level_size(w, config.zoom, level)
    if hi < 4 or wi < 4:
        raise ValueError(f"map {h}x{w} too small for level {level} at zoom {config.zoom}")
    reduced = AreaReduce(h, w, hi, wi).forward(source.values)
    return Map2D(reduced, np.ones((hi, wi), bool), tag=source.tag)


def _log_distance(distance_map: Map2D, config: PyramidConfig) -> np.ndarray:
    d = distance_map.plane()
    safe = np.where(distance_map.valid & (d > 0), d, config.ref_distance)
    return np.log(safe / config.ref_distance) / np.log(config.zoom)


def fixed_scale_map(distance_map: Map2D, config: PyramidConfig) -> ScaleMasks:
    """S = clamp(S_r - floor(log_zoom(d / d_r)), 0, n-1), per valid pixel."""
    logd = _log_distance(distance_map, config)
    s = config.ref_scale - np.floor(logd).astype(np.int64)
    s = np.clip(s, 0, config.n_scales - 1)
    return ScaleMasks(indices=s, soft=None, valid=distance_map.valid.copy())


def learnable_scale_map(distance_map: Map2D, params: LearnableScaleParams, config: PyramidConfig):
    """Soft masks M_i = exp(-(S-i)^2) / sum_j exp(-(S-j)^2) with S = b + k*logd.

    Returns (masks, cache); :func:`scale_map_backward` turns upstream mask
    gradients into (db, dk) using the cache.
    """
    logd = _log_distance(distance_map, config)
    s = params.b + params.k * logd
    idx = np.arange(config.n_scales, dtype=np.float64)[:, None, None]
    a = -((s[None] - idx) ** 2)
    a -= a.max(axis=0, keepdims=True)  # stabilized softmax
    e = np.exp(a)
    soft = e / e.sum(axis=0, keepdims=True)
    soft *= distance_map.valid[None]
    masks = ScaleMasks(indices=None, soft=soft, valid=distance_map.valid.copy())
    cache = {"soft": soft, "s": s, "logd": logd, "idx": idx, "valid": distance_map.valid}
    return masks, cache


def scale_map_backward(cache: dict, dmasks: np.ndarray) -> tuple[float, float]:
    """Gradients of a scalar loss w.r.t. (b, k) given dL/dM of shape (n, H, W)."""
    soft, s, idx = cache["soft"], cache["s"], cache["idx"]
    # dM_i/dS = M_i * (-2 (S - i) + 2 sum_j M_j (S - j))
    mean_dev = (soft * (s[None] - idx)).sum(axis=0)
    dm_ds = soft * 2.0 * (mean_dev[None] - (s[None] - idx))
    ds = (dmasks * dm_ds).sum(axis=0) * cache["valid"]
    db = float(ds.sum())
    dk = float((ds * cache["logd"]).sum())
    return db, dk


def merge_scales(pyramid: list, masks: ScaleMasks) -> Map2D:
    """F = sum_i M_i (x) F_i, element-wise over channels."""
    n = len(pyramid)
    soft = masks.as_soft(n)
    if soft.shape[0] != n:
        raise ValueError(f"{n} pyramid levels but {soft.shape[0]} masks")
    base = pyramid[0]
    if soft.shape[1:] != (base.height, base.width):
        raise ValueError("mask raster does not match the pyramid")
    out = np.zeros_like(base.values)
    for lvl, m in zip(pyramid, soft):
        if lvl.values.shape != base.values.shape:
            raise ValueError("pyramid levels must share one shape")
        out += lvl.values * m[None]
    return Map2D(out, base.valid & masks.valid, tag=base.tag)


def merge_scales_backward(dout: np.ndarray, pyramid: list, masks: ScaleMasks):
    """Returns (per-level gradients, per-mask gradients or None for discrete)."""
    n = len(pyramid)
    soft = masks.as_soft(n)
    dlevels = [dout * m[None] for m in soft]
    if masks.soft is None:
        return dlevels, None
    dmasks = np.stack([(dout * lvl.values).sum(axis=0) for lvl in pyramid])
    return dlevels, dmasks
