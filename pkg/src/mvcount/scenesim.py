"""Synthetic multi-view scene generator.

Produces a calibrated camera ring around a rectangular spawn region, per-frame
person annotations, rendered single-channel pseudo-images (one soft-edged
ellipse per visible person, intensity-jittered), and ground-truth density
maps.  All randomness flows from one 64-bit seed through counter-based Philox
streams, so regeneration is bitwise identical.

Scene directory layout::

    calib.txt  scene.txt  split.txt
    annot/NNNN.txt
    frames/NNNN_cam<K>.mv2d
    gt/NNNN_scene.mv2d  gt/NNNN_cam<K>.mv2d
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .density import (
    AnnotationSet,
    PersonRecord,
    render_scene_density,
    render_view_density,
)
from .geometry import CameraModel, SceneConfig, look_at_camera
from .maps import Map2D, write_map

# camera ring: azimuth (deg, clockwise from +y) and radius factor per camera
_AZIMUTHS = (180.0, 270.0, 60.0, 120.0, 320.0)
_RADII = (1.0, 0.85, 1.2, 0.9, 1.1)


@dataclass(frozen=True)
class SimConfig:
    n_cameras: int = 3
    n_frames: int = 20
    people_min: int = 5
    people_max: int = 20
    grid_width: int = 32
    grid_height: int = 24
    cell_size: float = 400.0
    h_avg: float = 1750.0
    image_width: int = 96
    image_height: int = 72
    sigma_cells: float = 1.5
    sigma_px: float = 1.5
    train_fraction: float = 0.6
    n_occluders: int = 0
    elevation_deg: float = 50.0  # camera elevation above the horizon
    distance_factor: float = 2.0  # camera ring radius / covered extent

    def __post_init__(self):
        if not 1 <= self.n_cameras <= len(_AZIMUTHS):
            raise ValueError(f"n_cameras must be in 1..{len(_AZIMUTHS)}")
        if self.people_min > self.people_max or self.people_min < 0:
            raise ValueError("invalid people range")
        if not 5.0 <= self.elevation_deg <= 85.0:
            raise ValueError("elevation must stay in (5, 85) degrees")
        if self.distance_factor < 0.6:
            raise ValueError("cameras too close to the spawn region")


@dataclass
class Occluder:
    """Opaque vertical wall over a ground segment (affects rendering only)."""

    x1: float
    y1: float
    x2: float
    y2: float
    height: float


@dataclass
class SimScene:
    config: SimConfig
    seed: int
    scene: SceneConfig
    cameras: list
    frames: list  # list[AnnotationSet]
    train_indices: list
    test_indices: list
    occluders: list = field(default_factory=list)
    out_dir: str | None = None

    @property
    def cam_ids(self) -> list:
        return [c.cam_id for c in self.cameras]


def spawn_margin_cells(config: SimConfig) -> int:
    return int(np.ceil(4.0 * config.sigma_cells)) + 1


def _spawn_bounds(scene: SceneConfig, margin: int):
    x0, y0 = scene.grid_to_world(scene.grid_height - 1 - margin, margin)
    x1, y1 = scene.grid_to_world(margin, scene.grid_width - 1 - margin)
    return float(x0), float(x1), float(y0), float(y1)  # x_min, x_max, y_min, y_max


def _build_cameras(config: SimConfig, scene: SceneConfig) -> list:
    margin = spawn_margin_cells(config)
    x_min, x_max, y_min, y_max = _spawn_bounds(scene, margin)
    cx, cy = (x_min + x_max) / 2, (y_min + y_max) / 2
    extent = max(x_max - x_min, y_max - y_min)
    pad = 0.15 * extent
    base_radius = config.distance_factor * (extent + 2 * pad)
    target = np.array([cx, cy, config.h_avg / 2])

    # corners of the spawn box (padded so density kernels near the edge stay
    # inside every view) at ground and average height drive the focal length:
    # every corner must project 1.5 px inside the image
    corners = []
    for x in (x_min - pad, x_max + pad):
        for y in (y_min - pad, y_max + pad):
            for z in (0.0, config.h_avg):
                corners.append((x, y, z))
    corners = np.array(corners)

    positions = []
    f_values = []
    for i in range(config.n_cameras):
        az = np.radians(_AZIMUTHS[i])
        radius = base_radius * _RADII[i]
        pos = np.array(
            [
                cx + radius * np.sin(az),
                cy + radius * np.cos(az),
                config.h_avg / 2 + radius * np.tan(np.radians(config.elevation_deg)),
            ]
        )
        cam = look_at_camera(
            str(i), pos, target, 1.0, 1.0, config.image_width, config.image_height
        )
        u, v, z = cam.world_to_pixel(corners)
        if np.any(z <= 0):
            raise ValueError("infeasible coverage: spawn region behind a camera")
        # normalized coords (f=1): the largest offset fixes the feasible focal
        half_u = np.abs(u - cam.cx).max()
        half_v = np.abs(v - cam.cy).max()
        f = min((cam.cx - 1.5) / half_u, (cam.cy - 1.5) / half_v)
        if f <= 0:
            raise ValueError("infeasible coverage: image too small for the spawn region")
        f_values.append(f)
        positions.append(pos)
    # one shared focal length keeps apparent sizes comparable across views
    f = float(min(f_values))
    return [
        look_at_camera(str(i), positions[i], target, f, f, config.image_width, config.image_height)
        for i in range(config.n_cameras)
    ]


def _frame_rng(seed: int, frame: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, (purpose << 32) | frame], dtype=np.uint64)))


def _segment_hits_wall(p0: np.ndarray, p1: np.ndarray, occ: Occluder) -> bool:
    a = np.array([occ.x1, occ.y1])
    b = np.array([occ.x2, occ.y2])
    d = p1[:2] - p0[:2]
    n = np.array([-(b - a)[1], (b - a)[0]])
    denom = d @ n
    if abs(denom) < 1e-12:
        return False
    t = (a - p0[:2]) @ n / denom
    if not 0.0 < t < 1.0:
        return False
    hit = p0[:2] + t * d
    ab = b - a
    s = (hit - a) @ ab / (ab @ ab)
    if not 0.0 <= s <= 1.0:
        return False
    z_hit = p0[2] + t * (p1[2] - p0[2])
    return 0.0 <= z_hit <= occ.height


def _person_visible(camera: CameraModel, head: np.ndarray, occluders: list) -> tuple:
    u, v, z = camera.world_to_pixel(head[None])
    u, v, z = float(u[0]), float(v[0]), float(z[0])
    if z <= 0 or not bool(camera.pixel_in_bounds(np.array(u), np.array(v))):
        return None
    cam_pos = camera.center
    for occ in occluders:
        if _segment_hits_wall(cam_pos, head, occ):
            return None
    return (u, v)


def render_frame(sim: SimScene, annotations: AnnotationSet, camera: CameraModel, rng: np.random.Generator) -> Map2D:
    """Draw every visible person as a soft-edged ellipse spanning feet-to-head."""
    h, w = camera.image_height, camera.image_width
    img = np.zeros((h, w))
    for person in annotations.persons:
        if person.heads.get(camera.cam_id) is None:
            rng.uniform(0.8, 1.2)  # keep the jitter stream aligned across views
            continue
        intensity = rng.uniform(0.8, 1.2)
        head = np.array([person.x, person.y, sim.scene.h_avg])
        feet = np.array([person.x, person.y, 0.0])
        uh, vh, _ = camera.world_to_pixel(head[None])
        uf, vf, zf = camera.world_to_pixel(feet[None])
        if zf[0] <= 0:
            continue
        top = np.array([float(uh[0]), float(vh[0])])
        bot = np.array([float(uf[0]), float(vf[0])])
        center = (top + bot) / 2
        axis = top - bot
        height_px = float(np.hypot(*axis))
        if height_px < 1.0:
            continue
        semi_b = height_px / 2
        semi_a = 0.2 * height_px
        axis_unit = axis / height_px
        perp = np.array([-axis_unit[1], axis_unit[0]])
        r0 = max(0, int(np.floor(center[1] - semi_b - 2)))
        r1 = min(h, int(np.ceil(center[1] + semi_b + 3)))
        c0 = max(0, int(np.floor(center[0] - semi_b - 2)))
        c1 = min(w, int(np.ceil(center[0] + semi_b + 3)))
        if r0 >= r1 or c0 >= c1:
            continue
        vv, uu = np.meshgrid(np.arange(r0, r1, dtype=np.float64), np.arange(c0, c1, dtype=np.float64), indexing="ij")
        du = uu - center[0]
        dv = vv - center[1]
        along = (du * axis_unit[0] + dv * axis_unit[1]) / semi_b
        across = (du * perp[0] + dv * perp[1]) / semi_a
        r = np.sqrt(along * along + across * across)
        patch = np.clip(0.5 + (1.0 - r) * semi_a, 0.0, 1.0) * intensity
        img[r0:r1, c0:c1] = np.maximum(img[r0:r1, c0:c1], patch)
    return Map2D(img[None], np.ones((h, w), bool), tag=camera.tag)


def generate(config: SimConfig, seed: int, out_dir) -> SimScene:
    """Build a deterministic scene and write it to `out_dir`."""
    origin_y = (config.grid_height - 1) * config.cell_size
    scene = SceneConfig(
        h_avg=config.h_avg,
        origin_x=0.0,
        origin_y=origin_y,
        cell_size=config.cell_size,
        grid_width=config.grid_width,
        grid_height=config.grid_height,
    )
    cameras = _build_cameras(config, scene)
    margin = spawn_margin_cells(config)
    x_min, x_max, y_min, y_max = _spawn_bounds(scene, margin)

    occluders = []
    if config.n_occluders:
        occ_rng = _frame_rng(seed, 0, 3)
        for _ in range(config.n_occluders):
            ox = occ_rng.uniform(x_min, x_max)
            oy = occ_rng.uniform(y_min, y_max)
            ang = occ_rng.uniform(0, np.pi)
            half = occ_rng.uniform(2, 5) * config.cell_size
            occluders.append(
                Occluder(
                    ox - half * np.cos(ang),
                    oy - half * np.sin(ang),
                    ox + half * np.cos(ang),
                    oy + half * np.sin(ang),
                    occ_rng.uniform(1.2, 2.0) * config.h_avg,
                )
            )

    sim = SimScene(
        config=config,
        seed=seed,
        scene=scene,
        cameras=cameras,
        frames=[],
        train_indices=[],
        test_indices=[],
        occluders=occluders,
        out_dir=str(out_dir),
    )

    for frame in range(config.n_frames):
        rng = _frame_rng(seed, frame, 1)
        n_people = int(rng.integers(config.people_min, config.people_max + 1))
        persons = []
        attempts = 0
        while len(persons) < n_people:
            attempts += 1
            if attempts > 200 * max(1, n_people):
                raise ValueError("infeasible coverage: cannot place visible people")
            x = rng.uniform(x_min, x_max)
            y = rng.uniform(y_min, y_max)
            head = np.array([x, y, config.h_avg])
            person = PersonRecord(x=x, y=y)
            visible_any = False
            for cam in cameras:
                px = _person_visible(cam, head, occluders)
                person.heads[cam.cam_id] = px
                visible_any = visible_any or (px is not None)
            if visible_any:
                persons.append(person)
        sim.frames.append(AnnotationSet(persons))

    n_train = int(round(config.train_fraction * config.n_frames))
    sim.train_indices = list(range(n_train))
    sim.test_indices = list(range(n_train, config.n_frames))

    _write_scene(sim, out_dir)
    return sim


def _write_scene(sim: SimScene, out_dir) -> None:
    out_dir = str(out_dir)
    for sub in ("annot", "frames", "gt"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    fileio.save_calibration(os.path.join(out_dir, "calib.txt"), sim.cameras)
    fileio.save_scene_config(os.path.join(out_dir, "scene.txt"), sim.scene)
    with open(os.path.join(out_dir, "split.txt"), "w") as f:
        f.write("train " + " ".join(map(str, sim.train_indices)) + "\n")
        f.write("test " + " ".join(map(str, sim.test_indices)) + "\n")

    for frame, annotations in enumerate(sim.frames):
        tagname = f"{frame:04d}"
        fileio.save_annotations(
            os.path.join(out_dir, "annot", f"{tagname}.txt"), annotations, sim.cam_ids
        )
        gt_scene = render_scene_density(annotations, sim.scene, sim.config.sigma_cells)
        write_map(os.path.join(out_dir, "gt", f"{tagname}_scene.mv2d"), gt_scene)
        render_rng = _frame_rng(sim.seed, frame, 2)
        for cam in sim.cameras:
            img = render_frame(sim, annotations, cam, render_rng)
            write_map(os.path.join(out_dir, "frames", f"{tagname}_cam{cam.cam_id}.mv2d"), img)
            gt_view = render_view_density(annotations, cam, sim.config.sigma_px)
            write_map(os.path.join(out_dir, "gt", f"{tagname}_cam{cam.cam_id}.mv2d"), gt_view)


def oracle_counts(sim: SimScene) -> list:
    """Exact per-frame counts: scene total and per-camera frustum counts
    (occlusion never removes a person from a frustum count)."""
    out = []
    for annotations in sim.frames:
        entry = {"scene": len(annotations)}
        for cam in sim.cameras:
            n = 0
            for p in annotations.persons:
                u, v, z = cam.world_to_pixel(np.array([[p.x, p.y, sim.scene.h_avg]]))
                if z[0] > 0 and bool(cam.pixel_in_bounds(u, v)[0]):
                    n += 1
            entry[f"cam{cam.cam_id}"] = n
        out.append(entry)
    return out
