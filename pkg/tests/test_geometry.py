import numpy as np
import pytest

from mvcount.geometry import (
    GROUND_TO_IMAGE,
    IMAGE_TO_GROUND,
    INVALID,
    CameraModel,
    SceneConfig,
    build_correspondence,
    compose_fields,
    distance_map,
    look_at_camera,
    project_pixel_to_ground,
    view_ray_angle_map,
)


def test_camera_invariants(tilted_camera):
    R = tilted_camera.R
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1.0) < 1e-9
    O = tilted_camera.center
    assert np.abs(R @ O + tilted_camera.T).max() < 1e-6


def test_camera_validation_rejects_bad_rotation():
    with pytest.raises(ValueError):
        CameraModel("bad", 100, 100, 50, 50, 2 * np.eye(3), np.zeros(3), 100, 100)
    with pytest.raises(ValueError):
        CameraModel("bad", -1, 100, 50, 50, np.eye(3), np.zeros(3), 100, 100)


def test_principal_ray_meets_plane_on_axis(scene):
    cam = CameraModel("t", 100, 100, 50, 50, np.eye(3), np.zeros(3), 101, 101)
    point = project_pixel_to_ground(cam, scene, (50.0, 50.0))
    assert np.allclose(point, [0.0, 0.0, 1750.0])


def test_default_average_height_is_1750(scene):
    assert scene.h_avg == 1750.0


def test_ray_behind_camera_is_invalid(scene):
    # camera above the plane looking straight up never meets z = h_avg in front
    R = look_at_camera("up", (0, 0, 3000), (0, 0, 9000), 100, 100, 101, 101).R
    cam = CameraModel("up", 100, 100, 50, 50, R, -R @ np.array([0.0, 0.0, 3000.0]), 101, 101)
    assert project_pixel_to_ground(cam, scene, (50.0, 50.0)) is INVALID


def test_round_trip_through_projection(tilted_camera, scene):
    rng = np.random.default_rng(7)
    x = rng.uniform(500, 12300, 1000)
    y = rng.uniform(500, 8900, 1000)
    pts = np.stack([x, y, np.full(1000, scene.h_avg)], axis=1)
    u, v, z = tilted_camera.world_to_pixel(pts)
    assert np.all(z > 0)
    for i in range(1000):
        w = project_pixel_to_ground(tilted_camera, scene, (u[i], v[i]))
        assert w is not INVALID
        assert np.hypot(w[0] - x[i], w[1] - y[i]) < 1e-6


def test_reprojection_lands_on_pixel(tilted_camera, scene):
    rng = np.random.default_rng(8)
    for _ in range(200):
        px = (rng.uniform(0, 79), rng.uniform(0, 59))
        w = project_pixel_to_ground(tilted_camera, scene, px)
        if w is INVALID:
            continue
        u, v, z = tilted_camera.world_to_pixel(w[None])
        assert z[0] > 0
        assert np.hypot(u[0] - px[0], v[0] - px[1]) < 1e-6


class TestCorrespondence:
    def test_identity_alignment(self, overhead_camera, scene):
        fld = build_correspondence(overhead_camera, scene, GROUND_TO_IMAGE)
        rr, cc = np.meshgrid(np.arange(48.0), np.arange(64.0), indexing="ij")
        assert fld.valid.all()
        assert np.abs(fld.rows - rr).max() < 1e-9
        assert np.abs(fld.cols - cc).max() < 1e-9

    def test_overhead_valid_region_is_centered_rectangle(self, scene):
        # zoomed-in overhead camera sees only the middle of the grid
        z0 = scene.h_avg + scene.cell_size * 75.0
        cx, cy = (scene.grid_width - 1) / 2, (scene.grid_height - 1) / 2
        wx, wy = scene.grid_to_world(cy, cx)
        cam = look_at_camera("z", (float(wx), float(wy), z0), (float(wx), float(wy), 0.0),
                             150.0, 150.0, scene.grid_width, scene.grid_height, cx=cx, cy=cy)
        fld = build_correspondence(cam, scene, GROUND_TO_IMAGE)
        rows_ok = np.where(fld.valid.any(axis=1))[0]
        cols_ok = np.where(fld.valid.any(axis=0))[0]
        inner = fld.valid[rows_ok[0] : rows_ok[-1] + 1, cols_ok[0] : cols_ok[-1] + 1]
        assert inner.all()  # rectangle, no holes
        assert not fld.valid[0].any() and not fld.valid[-1].any()  # corners clipped
        assert abs((rows_ok[0] + rows_ok[-1]) / 2 - cy) < 1.0  # centered
        assert abs((cols_ok[0] + cols_ok[-1]) / 2 - cx) < 1.0

    def test_field_matches_per_pixel_oracle(self, tilted_camera, scene):
        fld = build_correspondence(tilted_camera, scene, IMAGE_TO_GROUND)
        rng = np.random.default_rng(3)
        for _ in range(300):
            v = int(rng.integers(0, 60))
            u = int(rng.integers(0, 80))
            w = project_pixel_to_ground(tilted_camera, scene, (float(u), float(v)))
            if w is INVALID:
                assert not fld.valid[v, u] or True  # bounds may also invalidate
                continue
            r, c = scene.world_to_grid(w[0], w[1])
            if fld.valid[v, u]:
                assert abs(fld.rows[v, u] - r) < 1e-9
                assert abs(fld.cols[v, u] - c) < 1e-9

    def test_round_trip_closure_within_half_cell(self, tilted_camera, scene):
        g2i = build_correspondence(tilted_camera, scene, GROUND_TO_IMAGE)
        i2g = build_correspondence(tilted_camera, scene, IMAGE_TO_GROUND)
        rows, cols, ok = compose_fields(g2i, i2g)
        rr, cc = np.meshgrid(np.arange(48.0), np.arange(64.0), indexing="ij")
        err = np.hypot(rows - rr, cols - cc)
        assert ok.sum() > 500
        assert err[ok].max() < 0.5


class TestDistanceMap:
    def test_axis_aligned_distance(self, scene):
        cam = CameraModel("t", 100, 100, 50, 50, np.eye(3), np.zeros(3), 101, 101)
        dm = distance_map(cam, scene)
        assert abs(dm.plane()[50, 50] - 1750.0) < 1e-9

    def test_matches_euclidean_oracle(self, tilted_camera, scene):
        dm = distance_map(tilted_camera, scene)
        O = tilted_camera.center
        vv, uu = np.meshgrid(np.arange(60.0), np.arange(80.0), indexing="ij")
        ok = dm.valid
        for v, u in zip(*np.nonzero(ok)):
            w = project_pixel_to_ground(tilted_camera, scene, (float(u), float(v)))
            d = np.linalg.norm(np.asarray(w) - O)
            assert abs(dm.plane()[v, u] - d) / d < 1e-6

    def test_invalid_pixels_hold_sentinel(self, scene):
        # camera looking at the horizon: the upper image half misses the plane
        cam = look_at_camera("h", (6400, -9000, 3000), (6400, 40000, 3000), 60, 60, 80, 60)
        dm = distance_map(cam, scene)
        assert not dm.valid.all()
        assert (dm.plane()[~dm.valid] == -1.0).all()
        assert (dm.plane()[dm.valid] > 0).all()

    def test_monotone_toward_horizon(self, tilted_camera, scene):
        dm = distance_map(tilted_camera, scene)
        col = dm.plane()[:, 40]
        ok = dm.valid[:, 40]
        vals = col[ok]
        assert len(vals) > 10
        # image-down looks toward the camera: distance strictly decreases
        assert np.all(np.diff(vals) < 0)

    def test_invariant_under_world_rotation(self, tilted_camera, scene):
        ang = np.radians(33.0)
        Q = np.array(
            [[np.cos(ang), -np.sin(ang), 0.0], [np.sin(ang), np.cos(ang), 0.0], [0.0, 0.0, 1.0]]
        )
        # rigidly transform the world: X' = Q X; camera R' = R Q^T keeps the image
        cam2 = CameraModel(
            "r",
            tilted_camera.fx,
            tilted_camera.fy,
            tilted_camera.cx,
            tilted_camera.cy,
            tilted_camera.R @ Q.T,
            tilted_camera.T,
            tilted_camera.image_width,
            tilted_camera.image_height,
        )
        d1 = distance_map(tilted_camera, scene)
        d2 = distance_map(cam2, scene)
        m = d1.valid & d2.valid
        assert np.abs(d1.plane()[m] - d2.plane()[m]).max() / d1.plane()[m].max() < 1e-6


class TestAngleMap:
    def _footprint_camera(self, scene, fx=60.0):
        # camera whose ground footprint sits on a known grid point
        return look_at_camera("a", (3000.0, 2000.0, 4000.0), (6000.0, 6000.0, 875.0), fx, fx, 80, 60)

    @staticmethod
    def _angdiff(a, b):
        d = np.abs(np.asarray(a) - b) % 360.0
        return np.minimum(d, 360.0 - d)

    def test_cardinal_angles(self, scene):
        cam = self._footprint_camera(scene)
        am = view_ray_angle_map(cam, scene)
        O = cam.center
        r_n, c_n = scene.world_to_grid(O[0], O[1] + 1000.0)  # +y from footprint
        assert self._angdiff(am.plane()[int(round(r_n)), int(round(c_n))], 0.0) < 1e-6
        r_e, c_e = scene.world_to_grid(O[0] + 1000.0, O[1])  # +x: clockwise 90
        assert self._angdiff(am.plane()[int(round(r_e)), int(round(c_e))], 90.0) < 1e-6

    def test_matches_atan2_oracle(self, tilted_camera, scene):
        am = view_ray_angle_map(tilted_camera, scene)
        O = tilted_camera.center
        x, y = scene.cell_centers()
        ref = np.degrees(np.arctan2(x - O[0], y - O[1])) % 360.0
        assert np.abs(am.plane()[am.valid] - ref[am.valid]).max() < 1e-9

    def test_footprint_cells_invalid(self, scene):
        cam = self._footprint_camera(scene)
        am = view_ray_angle_map(cam, scene)
        O = cam.center
        r, c = scene.world_to_grid(O[0], O[1])
        assert not am.valid[int(round(r)), int(round(c))]

    def test_shifts_with_world_rotation(self, scene):
        # rotate the camera placement about the vertical axis by 40 degrees
        # around a cell; angles at corresponding cells shift by exactly -40
        shift = 40.0
        cam1 = self._footprint_camera(scene)
        O = cam1.center
        x, y = scene.cell_centers()
        a1 = np.degrees(np.arctan2(x - O[0], y - O[1])) % 360.0
        ang = np.radians(shift)
        Q = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        rel = np.stack([x.ravel() - O[0], y.ravel() - O[1]])
        rot = Q @ rel
        a2 = np.degrees(np.arctan2(rot[0], rot[1])) % 360.0
        # counterclockwise world rotation decreases the clockwise angle
        diff = (a1.ravel() - a2 - shift) % 360.0
        diff = np.minimum(diff, 360.0 - diff)
        assert diff.max() < 1e-9
