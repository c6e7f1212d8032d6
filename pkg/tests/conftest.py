import numpy as np
import pytest

from mvcount.geometry import CameraModel, SceneConfig, look_at_camera
from mvcount.pipelines import SceneDataset
from mvcount.scenesim import SimConfig, generate


@pytest.fixture(scope="session")
def demo_scene_dir(tmp_path_factory):
    """Small deterministic scene shared by most tests."""
    out = tmp_path_factory.mktemp("demo_scene")
    generate(SimConfig(n_frames=12), seed=2026, out_dir=out)
    return out


@pytest.fixture(scope="session")
def demo_sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo_sim")
    sim = generate(SimConfig(n_frames=12), seed=2026, out_dir=out)
    return sim


@pytest.fixture(scope="session")
def demo_dataset(demo_scene_dir):
    return SceneDataset(demo_scene_dir)


@pytest.fixture()
def scene():
    return SceneConfig(
        h_avg=1750.0, origin_x=0.0, origin_y=9400.0, cell_size=200.0, grid_width=64, grid_height=48
    )


@pytest.fixture()
def tilted_camera():
    """A calibrated camera south of the grid looking across it."""
    return look_at_camera("t0", (6400.0, -4500.0, 4200.0), (6400.0, 4700.0, 900.0), 75.0, 75.0, 80, 60)


@pytest.fixture()
def overhead_camera(scene):
    """Straight-down camera aligned 1:1 with the ground grid."""
    z0 = scene.h_avg + scene.cell_size * 75.0
    cx = (scene.grid_width - 1) / 2
    cy = (scene.grid_height - 1) / 2
    wx, wy = scene.grid_to_world(cy, cx)
    return look_at_camera(
        "ov",
        (float(wx), float(wy), z0),
        (float(wx), float(wy), 0.0),
        75.0,
        75.0,
        scene.grid_width,
        scene.grid_height,
        cx=cx,
        cy=cy,
    )
