"""Pinhole cameras and image<->ground-plane correspondences.

Conventions (used everywhere in this package):

* World frame: x/y span the ground plane, z is up, units are millimetres.
  A camera maps world points via ``X_cam = R @ X_world + T`` and the pinhole
  division ``u = fx * Xc/Zc + cx``, ``v = fy * Yc/Zc + cy``.
* Image raster: origin at the top-left pixel center, u (column) rightward,
  v (row) downward; continuous coordinates are measured at pixel centers.
* Ground grid raster: cell (row r, col c) sits at world
  ``x = origin_x + c * cell_size``, ``y = origin_y - r * cell_size`` -- i.e.
  the grid is stored like an image seen from above with north (+y) at row 0.
  With that convention a straight-down camera can be aligned 1:1 with the
  grid by a proper rotation.
* Back-projection uses the average-height plane z = h_avg; intersections at
  or behind the camera are invalid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

_EYE3 = np.eye(3)


@dataclass(frozen=True)
class CameraModel:
    """Calibrated pinhole camera (world -> camera extrinsics R, T)."""

    cam_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # (3, 3) world -> camera rotation
    T: np.ndarray  # (3,) translation, mm
    image_width: int
    image_height: int

    def __post_init__(self):
        R = np.ascontiguousarray(self.R, dtype=np.float64)
        T = np.ascontiguousarray(self.T, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"camera {self.cam_id}: focal lengths must be positive")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError(f"camera {self.cam_id}: image size must be at least 1x1")
        if np.abs(R.T @ R - _EYE3).max() >= 1e-9 or abs(np.linalg.det(R) - 1.0) >= 1e-9:
            raise ValueError(f"camera {self.cam_id}: R is not a proper rotation")

    @property
    def center(self) -> np.ndarray:
        """Camera center O = -R^T T in world coordinates."""
        return -self.R.T @ self.T

    @property
    def tag(self) -> str:
        return f"cam:{self.cam_id}"

    def world_to_pixel(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project world points (N, 3) -> (u, v, depth) arrays.

        Depth is the camera-frame z; points with depth <= 0 are behind the
        camera and yield meaningless pixels (callers must mask on depth).
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        cam = pts @ self.R.T + self.T
        z = cam[:, 2]
        safe = np.where(z != 0.0, z, 1.0)
        u = self.fx * cam[:, 0] / safe + self.cx
        v = self.fy * cam[:, 1] / safe + self.cy
        return u, v, z

    def pixel_in_bounds(self, u, v) -> np.ndarray:
        return (u >= 0) & (u <= self.image_width - 1) & (v >= 0) & (v <= self.image_height - 1)

    def halved(self) -> "CameraModel":
        """Camera for the raster produced by one 2x2 pooling step.

        Pool output cell (i, j) covers input cells (2i, 2i+1) x (2j, 2j+1),
        so full-res coordinate u maps to (u - 0.5) / 2.
        """
        return replace(
            self,
            fx=self.fx / 2,
            fy=self.fy / 2,
            cx=(self.cx - 0.5) / 2,
            cy=(self.cy - 0.5) / 2,
            image_width=(self.image_width + 1) // 2,
            image_height=(self.image_height + 1) // 2,
        )

    def scaled(self, pool_steps: int) -> "CameraModel":
        cam = self
        for _ in range(pool_steps):
            cam = cam.halved()
        return cam


@dataclass(frozen=True)
class SceneConfig:
    """Average-height plane and the discretized ground grid."""

    h_avg: float  # mm
    origin_x: float  # world x of cell (0, 0) center, mm
    origin_y: float  # world y of cell (0, 0) center, mm
    cell_size: float  # mm per cell
    grid_width: int  # columns
    grid_height: int  # rows

    def __post_init__(self):
        if self.h_avg <= 0:
            raise ValueError("h_avg must be positive")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.grid_width < 1 or self.grid_height < 1:
            raise ValueError("grid dimensions must be at least 1")

    def grid_to_world(self, rows, cols) -> tuple[np.ndarray, np.ndarray]:
        x = self.origin_x + np.asarray(cols, dtype=np.float64) * self.cell_size
        y = self.origin_y - np.asarray(rows, dtype=np.float64) * self.cell_size
        return x, y

    def world_to_grid(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        rows = (self.origin_y - np.asarray(y, dtype=np.float64)) / self.cell_size
        cols = (np.asarray(x, dtype=np.float64) - self.origin_x) / self.cell_size
        return rows, cols

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World (x, y) of every cell center, each (grid_height, grid_width)."""
        rr, cc = np.meshgrid(np.arange(self.grid_height), np.arange(self.grid_width), indexing="ij")
        return self.grid_to_world(rr, cc)


GROUND_TO_IMAGE = "ground_to_image"
IMAGE_TO_GROUND = "image_to_ground"


@dataclass
class CorrespondenceField:
    """Per-target-cell continuous source coordinates plus validity.

    ``rows``/``cols`` are source coordinates (source-raster units) indexed by
    target cell; invalid cells carry no meaningful coordinate.
    """

    rows: np.ndarray
    cols: np.ndarray
    valid: np.ndarray
    direction: str  # GROUND_TO_IMAGE (target=ground) or IMAGE_TO_GROUND
    source_tag: str
    target_tag: str

    @property
    def target_shape(self) -> tuple[int, int]:
        return self.valid.shape


class Invalid:
    """Sentinel for rays that miss the average-height plane in front of the camera."""

    __slots__ = ()

    def __repr__(self):
        return "Invalid"


INVALID = Invalid()


def _back_project(camera: CameraModel, scene: SceneConfig, u, v):
    """Vectorized pixel -> (x, y) on the h_avg plane; returns (x, y, ok)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    dir_cam = np.stack(
        [(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1
    )
    dir_world = dir_cam @ camera.R  # R^T applied row-wise
    origin = camera.center
    dz = dir_world[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (scene.h_avg - origin[2]) / dz
    ok = np.isfinite(t) & (t > 0)
    x = origin[0] + t * dir_world[..., 0]
    y = origin[1] + t * dir_world[..., 1]
    return x, y, ok


def project_pixel_to_ground(camera: CameraModel, scene: SceneConfig, pixel):
    """Back-project one pixel onto the plane z = h_avg.

    Returns the world point (x, y, h_avg) or the INVALID sentinel when the
    ray is parallel to the plane or meets it behind the camera.
    """
    x, y, ok = _back_project(camera, scene, pixel[0], pixel[1])
    if not bool(ok):
        return INVALID
    return np.array([float(x), float(y), scene.h_avg])


def build_correspondence(camera: CameraModel, scene: SceneConfig, direction: str) -> CorrespondenceField:
    """Correspondence field between the ground grid and a camera raster.

    GROUND_TO_IMAGE: per ground cell, the continuous pixel viewing its
    (x, y, h_avg) world point (target = ground grid, source = image).
    IMAGE_TO_GROUND: per pixel, the continuous grid coordinate of its plane
    intersection (target = image, source = ground grid).
    """
    if direction == GROUND_TO_IMAGE:
        x, y = scene.cell_centers()
        pts = np.stack([x.ravel(), y.ravel(), np.full(x.size, scene.h_avg)], axis=1)
        u, v, z = camera.world_to_pixel(pts)
        ok = (z > 0) & camera.pixel_in_bounds(u, v)
        shape = (scene.grid_height, scene.grid_width)
        return CorrespondenceField(
            rows=np.where(ok, v, 0.0).reshape(shape),
            cols=np.where(ok, u, 0.0).reshape(shape),
            valid=ok.reshape(shape),
            direction=direction,
            source_tag=camera.tag,
            target_tag="ground",
        )
    if direction == IMAGE_TO_GROUND:
        vv, uu = np.meshgrid(
            np.arange(camera.image_height, dtype=np.float64),
            np.arange(camera.image_width, dtype=np.float64),
            indexing="ij",
        )
        x, y, ok = _back_project(camera, scene, uu, vv)
        rows, cols = scene.world_to_grid(x, y)
        ok &= (rows >= 0) & (rows <= scene.grid_height - 1)
        ok &= (cols >= 0) & (cols <= scene.grid_width - 1)
        return CorrespondenceField(
            rows=np.where(ok, rows, 0.0),
            cols=np.where(ok, cols, 0.0),
            valid=ok,
            direction=direction,
            source_tag="ground",
            target_tag=camera.tag,
        )
    raise ValueError(f"unknown direction {direction!r}")


def compose_fields(first: CorrespondenceField, second: CorrespondenceField):
    """Follow `first`, then bilinearly evaluate `second` at the landing coords.

    Returns (rows, cols, valid) on `first`'s target raster, expressed in
    `second`'s source units.  Used by the round-trip closure checks.
    """
    if first.source_tag != second.target_tag:
        raise ValueError("fields do not chain")
    h, w = second.target_shape

    def interp(plane):
        r0 = np.clip(np.floor(first.rows).astype(int), 0, h - 2)
        c0 = np.clip(np.floor(first.cols).astype(int), 0, w - 2)
        fr = np.clip(first.rows - r0, 0.0, 1.0)
        fc = np.clip(first.cols - c0, 0.0, 1.0)
        return (
            plane[r0, c0] * (1 - fr) * (1 - fc)
            + plane[r0, c0 + 1] * (1 - fr) * fc
            + plane[r0 + 1, c0] * fr * (1 - fc)
            + plane[r0 + 1, c0 + 1] * fr * fc
        )

    rows = interp(second.rows)
    cols = interp(second.cols)
    ok = first.valid & (interp(second.valid.astype(np.float64)) > 0.999)
    return rows, cols, ok


def distance_map(camera: CameraModel, scene: SceneConfig):
    """Per-pixel distance (mm) from the camera to the plane intersection.

    d(u, v) = ||R P(u, v, h_avg) + T||.  Pixels whose ray misses the plane in
    front of the camera are flagged invalid and hold a sentinel of -1.
    """
    from .maps import Map2D

    field = build_correspondence(camera, scene, IMAGE_TO_GROUND)
    vv, uu = np.meshgrid(
        np.arange(camera.image_height, dtype=np.float64),
        np.arange(camera.image_width, dtype=np.float64),
        indexing="ij",
    )
    x, y, ok = _back_project(camera, scene, uu, vv)
    pts = np.stack([x.ravel(), y.ravel(), np.full(x.size, scene.h_avg)], axis=1)
    cam = pts @ camera.R.T + camera.T
    d = np.linalg.norm(cam, axis=1).reshape(x.shape)
    d = np.where(ok, d, -1.0)
    return Map2D(d[None], ok, tag=camera.tag)


def view_ray_angle_map(camera: CameraModel, scene: SceneConfig):
    """Planar view-ray angle per ground cell, degrees in [0, 360).

    The angle is measured clockwise from the +y unit vector (with x right and
    y up on the ground plane) to the horizontal projection of O -> cell.
    Cells within one cell_size of the camera's ground footprint are invalid.
    """
    from .maps import Map2D

    origin = camera.center
    x, y = scene.cell_centers()
    vx = x - origin[0]
    vy = y - origin[1]
    dist = np.hypot(vx, vy)
    ok = dist >= scene.cell_size
    ang = np.degrees(np.arctan2(vx, vy)) % 360.0
    ang = np.where(ok, ang, 0.0)
    return Map2D(ang[None], ok, tag="ground")


def look_at_camera(
    cam_id: str,
    position,
    target,
    fx: float,
    fy: float,
    image_width: int,
    image_height: int,
    cx: float | None = None,
    cy: float | None = None,
) -> CameraModel:
    """Convenience constructor: camera at `position` looking at `target`.

    The image v axis is aligned with "world down" as closely as possible.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(forward)
    if n == 0:
        raise ValueError("camera position and target coincide")
    z_cam = forward / n
    up = np.array([0.0, 0.0, 1.0])
    if abs(z_cam @ up) > 0.9999:  # straight down/up: use north to fix the roll
        up = np.array([0.0, 1.0, 0.0])
    x_cam = np.cross(z_cam, up)
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(z_cam, x_cam)
    R = np.stack([x_cam, y_cam, z_cam])
    # clean up rounding so the orthonormality invariant holds exactly enough
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    T = -R @ position
    return CameraModel(
        cam_id=cam_id,
        fx=fx,
        fy=fy,
        cx=(image_width - 1) / 2 if cx is None else cx,
        cy=(image_height - 1) / 2 if cy is None else cy,
        R=R,
        T=T,
        image_width=image_width,
        image_height=image_height,
    )
