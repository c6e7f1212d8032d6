"""Density-map synthesis, projection normalization, and count metrics.

Ground-truth density maps place one unit-mass isotropic Gaussian per person
(truncated at 4 sigma and renormalized, so a fully interior person adds
exactly one to the map sum).  Projection normalization weights undo the mass
distortion introduced by pulling an image-plane density map onto the ground
grid: for each ground cell, a single unit Gaussian is rendered at the cell's
image correspondent, pushed through the sampler projection, and the weight is
the ratio of the image-space sum to the projected sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GROUND_TO_IMAGE, CameraModel, SceneConfig, _back_project, build_correspondence
from .maps import Map2D
from .sampler import sample, sample_adjoint

DEFAULT_SIGMA_CELLS = 3.0
DEFAULT_SIGMA_PX = 3.0
_TRUNC = 4.0


@dataclass
class PersonRecord:
    """One annotated person: ground position plus optional per-view head pixels."""

    x: float  # world mm
    y: float  # world mm
    heads: dict = field(default_factory=dict)  # cam_id -> (u, v) or None when invisible


@dataclass
class AnnotationSet:
    persons: list

    def __len__(self):
        return len(self.persons)

    def world_points(self) -> np.ndarray:
        if not self.persons:
            return np.zeros((0, 2))
        return np.array([[p.x, p.y] for p in self.persons])

    def head_pixels(self, cam_id: str) -> np.ndarray:
        """(N, 2) array of (u, v) for persons visible in this camera."""
        pts = [p.heads[cam_id] for p in self.persons if p.heads.get(cam_id) is not None]
        return np.array(pts) if pts else np.zeros((0, 2))


def gaussian_window(sigma: float, center_row: float, center_col: float):
    """Truncated, unit-mass Gaussian stamp around a continuous center.

    Returns (rows0, cols0, stamp): the top-left integer corner and the stamp
    values on the (2R+1)^2 window, zero outside radius 4 sigma.
    """
    radius = int(np.ceil(_TRUNC * sigma))
    r0 = int(np.floor(center_row)) - radius
    c0 = int(np.floor(center_col)) - radius
    rr = np.arange(r0, r0 + 2 * radius + 2, dtype=np.float64)
    cc = np.arange(c0, c0 + 2 * radius + 2, dtype=np.float64)
    dr = rr[:, None] - center_row
    dc = cc[None, :] - center_col
    d2 = dr * dr + dc * dc
    stamp = np.exp(-d2 / (2.0 * sigma * sigma))
    stamp[d2 > (_TRUNC * sigma) ** 2] = 0.0
    total = stamp.sum()
    if total > 0:
        stamp /= total
    return r0, c0, stamp


def render_density(points, sigma: float, height: int, width: int, tag: str = "ground") -> Map2D:
    """Sum of unit-mass Gaussians at continuous (row, col) centers.

    Points whose kernel is clipped by the raster border contribute only their
    in-bounds mass; the clipped total is recorded in the map's meta dict.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = np.zeros((height, width))
    clipped = 0.0
    for row, col in np.asarray(points, dtype=np.float64).reshape(-1, 2):
        r0, c0, stamp = gaussian_window(sigma, row, col)
        sr0, sc0 = max(0, -r0), max(0, -c0)
        sr1 = stamp.shape[0] - max(0, r0 + stamp.shape[0] - height)
        sc1 = stamp.shape[1] - max(0, c0 + stamp.shape[1] - width)
        if sr1 <= sr0 or sc1 <= sc0:
            clipped += 1.0
            continue
        part = stamp[sr0:sr1, sc0:sc1]
        out[r0 + sr0 : r0 + sr1, c0 + sc0 : c0 + sc1] += part
        clipped += 1.0 - part.sum()
    m = Map2D(out[None], np.ones((height, width), bool), tag=tag)
    m.meta["clipped_mass"] = float(clipped)
    return m


def render_scene_density(annotations: AnnotationSet, scene: SceneConfig, sigma_cells: float = DEFAULT_SIGMA_CELLS) -> Map2D:
    pts = annotations.world_points()
    if len(pts) == 0:
        return render_density(np.zeros((0, 2)), sigma_cells, scene.grid_height, scene.grid_width)
    rows, cols = scene.world_to_grid(pts[:, 0], pts[:, 1])
    return render_density(np.stack([rows, cols], axis=1), sigma_cells, scene.grid_height, scene.grid_width)


def render_view_density(annotations: AnnotationSet, camera: CameraModel, sigma_px: float = DEFAULT_SIGMA_PX) -> Map2D:
    heads = annotations.head_pixels(camera.cam_id)
    pts = heads[:, ::-1] if len(heads) else np.zeros((0, 2))  # (u, v) -> (row, col)
    return render_density(pts, sigma_px, camera.image_height, camera.image_width, tag=camera.tag)


@dataclass
class NormalizationMap:
    """Eq.-style projection-normalization weights for one camera (ground grid)."""

    cam_id: str
    weights: Map2D  # positive on valid cells


def normalization_map(camera: CameraModel, scene: SceneConfig, sigma: float = DEFAULT_SIGMA_PX) -> NormalizationMap:
    """Per-ground-cell weight restoring a unit Gaussian's mass after projection.

    For ground cell (x, y) with image correspondent (x0, y0), the weight is
    sum(D) / sum(project(D)) where D is one unit Gaussian at (x0, y0).  The
    projected sum is evaluated exactly through the sampler's transpose: it
    equals <D, A> with A the sampler adjoint of an all-ones ground map, so one
    adjoint pass plus one local window dot per cell reproduces the literal
    render-then-project computation.  Cells whose projected sum falls below
    1e-8 are marked invalid.
    """
    fld = build_correspondence(camera, scene, GROUND_TO_IMAGE)
    ones = Map2D(np.ones((1, scene.grid_height, scene.grid_width)), fld.valid.copy(), tag="ground")
    acc = sample_adjoint(ones, fld, camera.image_height, camera.image_width).plane()

    h, w = camera.image_height, camera.image_width
    weights = np.zeros((scene.grid_height, scene.grid_width))
    ok = fld.valid.copy()
    rows, cols = fld.rows, fld.cols
    for r in range(scene.grid_height):
        for c in range(scene.grid_width):
            if not ok[r, c]:
                continue
            r0, c0, stamp = gaussian_window(sigma, rows[r, c], cols[r, c])
            sr0, sc0 = max(0, -r0), max(0, -c0)
            sr1 = stamp.shape[0] - max(0, r0 + stamp.shape[0] - h)
            sc1 = stamp.shape[1] - max(0, c0 + stamp.shape[1] - w)
            if sr1 <= sr0 or sc1 <= sc0:
                ok[r, c] = False
                continue
            part = stamp[sr0:sr1, sc0:sc1]
            num = part.sum()
            den = float((part * acc[r0 + sr0 : r0 + sr1, c0 + sc0 : c0 + sc1]).sum())
            if den < 1e-8:
                ok[r, c] = False
                continue
            weights[r, c] = num / den
    return NormalizationMap(camera.cam_id, Map2D(weights[None], ok, tag="ground"))


def project_and_normalize(view_density: Map2D, fld, norm: NormalizationMap) -> Map2D:
    """Pull a view density onto the ground grid and restore per-kernel mass."""
    projected = sample(view_density, fld)
    w = norm.weights
    values = projected.values * w.values[0] * w.valid
    return Map2D(values, projected.valid & w.valid, tag="ground")


@dataclass
class ViewWeightMap:
    """Per-pixel visibility weights 1/t for the simple fused-count baseline."""

    cam_id: str
    weights: Map2D


def _frustum_contains(camera: CameraModel, scene: SceneConfig, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    pts = np.stack([x.ravel(), y.ravel(), np.full(x.size, scene.h_avg)], axis=1)
    u, v, z = camera.world_to_pixel(pts)
    # tolerance absorbs projection round-trip rounding at the image border
    eps = 1e-6
    inb = (u >= -eps) & (u <= camera.image_width - 1 + eps) & (v >= -eps) & (v <= camera.image_height - 1 + eps)
    return ((z > 0) & inb).reshape(x.shape)


def view_weight_maps(cameras: list, scene: SceneConfig) -> list:
    """For every camera, W_i(x0, y0) = 1 / (number of views seeing P(x0, y0))."""
    if not cameras:
        raise ValueError("need at least one camera")
    out = []
    for cam in cameras:
        vv, uu = np.meshgrid(
            np.arange(cam.image_height, dtype=np.float64),
            np.arange(cam.image_width, dtype=np.float64),
            indexing="ij",
        )
        x, y, ok = _back_project(cam, scene, uu, vv)
        t = np.zeros(x.shape)
        for other in cameras:
            t += _frustum_contains(other, scene, x, y)
        t = np.maximum(t, 1.0)  # the owning camera sees every valid own pixel
        w = np.where(ok, 1.0 / t, 0.0)
        out.append(ViewWeightMap(cam.cam_id, Map2D(w[None], ok, tag=cam.tag)))
    return out


def dmap_weighted_count(view_densities: list, weights: list) -> float:
    """Scene count as the visibility-weighted sum of per-view density maps."""
    if len(view_densities) != len(weights):
        raise ValueError("need one weight map per view density")
    total = 0.0
    for dm, wm in zip(view_densities, weights):
        w = wm.weights if isinstance(wm, ViewWeightMap) else wm
        if dm.plane().shape != w.plane().shape:
            raise ValueError(f"shape mismatch for camera {getattr(wm, 'cam_id', '?')}")
        total += float((dm.plane() * w.plane()).sum())
    return total


def mae_nae(predictions, truths) -> tuple[float, float]:
    """Mean absolute error and normalized (relative) absolute error."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("predictions and truths must be equal nonempty lists")
    if np.any(t == 0):
        raise ValueError("NAE undefined for zero ground-truth counts")
    err = np.abs(p - t)
    return float(err.mean()), float((err / t).mean())


def camera_region_count(scene_density: Map2D, camera: CameraModel, scene: SceneConfig) -> float:
    """Sum of the scene density over ground cells inside the camera frustum.

    No occlusion test: fully occluded people inside the field of view count.
    """
    x, y = scene.cell_centers()
    mask = _frustum_contains(camera, scene, x, y)
    return float((scene_density.plane() * mask).sum())
