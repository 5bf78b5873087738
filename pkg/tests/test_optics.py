"""Projection, calibration, pixel-surface map, and unwarp tests."""

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from rolltact.geometry import Pose, surface_grid, surface_normal
from rolltact.optics import (
    CalibrationError,
    CameraModel,
    CheckerBoard,
    MirrorPlane,
    OpticsError,
    ProjectionError,
    ShapeMismatchError,
    build_surface_map,
    calibrate,
    load_camera,
    pixel_rays,
    project,
    project_points,
    save_camera,
    synthesize_observation,
    unwarp,
)

BOARD = CheckerBoard()


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def test_project_axis_point_hits_principal_point(cam_direct):
    c = cam_direct.center
    axis = cam_direct.rotation.T @ np.array([0.0, 0.0, 1.0])
    px = project(c + 17.0 * axis, cam_direct)
    k = cam_direct.intrinsics
    assert px[0] == pytest.approx(k[0, 2], abs=1e-9)
    assert px[1] == pytest.approx(k[1, 2], abs=1e-9)


def test_project_scale_along_ray_invariant(cam_direct):
    c = cam_direct.center
    ray = cam_direct.rotation.T @ np.array([0.3, -0.2, 1.0])
    a = project(c + 8.0 * ray, cam_direct)
    b = project(c + 16.0 * ray, cam_direct)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_project_matches_homogeneous_multiply():
    rot = Rotation.from_euler("zyx", [0.3, -0.2, 0.5]).as_matrix()
    trans = np.array([4.0, -2.0, 30.0])
    k = np.array([[210.0, 1.5, 321.0], [0.0, 195.0, 242.5], [0.0, 0.0, 1.0]])
    cam = CameraModel(intrinsics=k, rotation=rot, translation=trans,
                      resolution=(640, 480), fov_deg=100.0)
    rng = np.random.default_rng(11)
    x_cam = np.column_stack([rng.uniform(-20, 20, 40), rng.uniform(-20, 20, 40),
                             rng.uniform(10, 60, 40)])
    world = (x_cam - trans) @ rot  # R.T @ (x_cam - t) per row
    px, valid = project_points(world, cam)
    assert valid.all()
    h = (k @ (world @ rot.T + trans).T).T
    brute = h[:, :2] / h[:, 2:3]
    assert np.abs(px - brute).max() < 1e-9


def test_project_behind_camera_raises(cam_direct):
    c = cam_direct.center
    axis = cam_direct.rotation.T @ np.array([0.0, 0.0, 1.0])
    with pytest.raises(ProjectionError):
        project(c - 5.0 * axis, cam_direct)


def test_mirror_view_is_column_flip_of_direct_view(cam_direct, cam_mirror):
    pts = surface_grid(np.array([0.1, -0.2, 0.0]), np.array([0.3, -0.5, 0.0]),
                       _geom_of(cam_direct))
    direct, _ = project_points(pts, cam_direct)
    mirrored, _ = project_points(pts, cam_mirror)
    width = cam_direct.resolution[0]
    np.testing.assert_allclose(mirrored[:, 0], (width - 1) - direct[:, 0],
                               atol=1e-9)
    np.testing.assert_allclose(mirrored[:, 1], direct[:, 1], atol=1e-9)


def _geom_of(_cam):
    from rolltact.geometry import RollerGeometry
    return RollerGeometry()


def test_mirror_sides(cam_mirror):
    mirror = cam_mirror.mirror
    patch_center = np.array([20.0, 0.0, 0.0])
    virtual = mirror.reflect_points(cam_mirror.center)
    assert mirror.side(cam_mirror.center) * mirror.side(patch_center) > 0
    assert mirror.side(virtual) * mirror.side(patch_center) < 0


def test_pixel_rays_invert_projection(cam_mirror):
    origin, dirs = pixel_rays(np.array([[100.0, 200.0], [320.0, 50.0]]),
                              cam_mirror)
    pts = origin + 25.0 * dirs
    px, valid = project_points(pts, cam_mirror)
    assert valid.all()
    np.testing.assert_allclose(px, [[100.0, 200.0], [320.0, 50.0]], atol=1e-9)


def test_camera_model_invariants():
    good = np.array([[200.0, 0.0, 320.0], [0.0, 200.0, 240.0], [0.0, 0.0, 1.0]])
    with pytest.raises(ValueError):
        CameraModel(intrinsics=good + np.tril(np.ones((3, 3)), -1),
                    rotation=np.eye(3), translation=np.zeros(3),
                    resolution=(640, 480), fov_deg=90.0)
    with pytest.raises(ValueError):
        CameraModel(intrinsics=good, rotation=np.eye(3) * 1.001,
                    translation=np.zeros(3), resolution=(640, 480), fov_deg=90.0)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def _board_poses():
    base = np.column_stack([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    half = np.array([(BOARD.cols - 1) / 2.0 * BOARD.square_mm,
                     (BOARD.rows - 1) / 2.0 * BOARD.square_mm, 0.0])
    poses = []
    specs = [
        ((16.0, 0.0, 0.0), (0.0, 0.0)),
        ((20.0, 4.0, 2.0), (0.35, 0.1)),
        ((22.0, -5.0, 1.0), (-0.3, 0.2)),
        ((18.0, 2.0, -4.0), (0.15, -0.35)),
        ((24.0, -2.0, 3.0), (-0.2, -0.2)),
        ((21.0, 5.0, -2.0), (0.4, 0.25)),
        ((19.0, -4.0, -3.0), (-0.35, 0.3)),
        ((25.0, 1.0, 4.0), (0.25, -0.15)),
        ((17.0, 3.0, 3.0), (-0.15, 0.12)),
        ((23.0, -1.0, -4.0), (0.1, 0.4)),
    ]
    for center, (tx, ty) in specs:
        rot = base @ Rotation.from_euler("xy", [tx, ty]).as_matrix()
        poses.append(Pose(rot, np.asarray(center) - rot @ half))
    return poses


def test_calibration_zero_noise_round_trip(cam_direct):
    obs = [synthesize_observation(BOARD, p, cam_direct) for p in _board_poses()]
    model, report = calibrate(obs, BOARD, cam_direct.resolution)
    k_true, k_est = cam_direct.intrinsics, model.intrinsics
    for idx in ((0, 0), (1, 1), (0, 2), (1, 2)):
        assert abs(k_est[idx] - k_true[idx]) < 1e-6 * abs(k_true[idx])
    assert abs(model.distortion[0]) < 1e-6
    assert abs(model.distortion[1]) < 1e-6
    rel = model.rotation @ cam_direct.rotation.T
    angle = math.acos(np.clip((np.trace(rel) - 1) / 2, -1, 1))
    assert angle < 1e-6
    np.testing.assert_allclose(model.translation, cam_direct.translation,
                               atol=1e-5)
    assert report.rms_px < 1e-3


def test_calibration_noisy_statistical(cam_direct):
    for seed in range(20):
        obs = [synthesize_observation(BOARD, p, cam_direct,
                                      noise_px=0.2, rng=seed * 101 + i)
               for i, p in enumerate(_board_poses())]
        _, report = calibrate(obs, BOARD, cam_direct.resolution)
        assert report.rms_px < 0.3


def test_calibration_too_few_views(cam_direct):
    obs = [synthesize_observation(BOARD, p, cam_direct)
           for p in _board_poses()[:2]]
    with pytest.raises(CalibrationError):
        calibrate(obs, BOARD, cam_direct.resolution)


def test_calibration_order_invariant(cam_direct):
    obs = [synthesize_observation(BOARD, p, cam_direct) for p in _board_poses()]
    a, _ = calibrate(obs, BOARD, cam_direct.resolution)
    b, _ = calibrate(obs[::-1], BOARD, cam_direct.resolution)
    np.testing.assert_allclose(a.intrinsics, b.intrinsics, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(a.translation, b.translation, atol=1e-5)


# ---------------------------------------------------------------------------
# Pixel-surface map
# ---------------------------------------------------------------------------

def test_map_center_pixel_self_consistent(geom, cam_mirror, pmap_mirror):
    k = cam_mirror.intrinsics
    row, col = int(round(k[1, 2])), int(round(k[0, 2]))
    assert pmap_mirror.valid[row, col]
    px, ok = project_points(pmap_mirror.points[row, col], cam_mirror)
    assert ok
    assert abs(px[0] - col) < 0.5 and abs(px[1] - row) < 0.5


def test_map_reprojects_all_valid_pixels(cam_mirror, pmap_mirror):
    sel = pmap_mirror.valid[::7, ::7]
    pts = pmap_mirror.points[::7, ::7][sel]
    px, ok = project_points(pts, cam_mirror)
    assert ok.all()
    cols, rows = np.meshgrid(np.arange(0, 640, 7, dtype=float),
                             np.arange(0, 480, 7, dtype=float))
    want = np.stack([cols, rows], axis=-1)[sel]
    assert np.abs(px - want).max() < 0.5


def test_map_normals_match_analytic(geom, pmap_mirror):
    sel = pmap_mirror.valid
    expect = surface_normal(pmap_mirror.surface_u[sel],
                            pmap_mirror.surface_v[sel], geom)
    assert np.abs(expect - pmap_mirror.normals[sel]).max() < 1e-6
    assert np.abs(np.linalg.norm(pmap_mirror.normals[sel], axis=-1) - 1).max() < 1e-9


def test_map_mirror_equals_flipped_direct(pmap_direct, pmap_mirror):
    both = pmap_direct.valid & pmap_mirror.valid[:, ::-1]
    assert both.mean() > 0.95
    np.testing.assert_allclose(pmap_mirror.surface_u[:, ::-1][both],
                               pmap_direct.surface_u[both], atol=1e-9)
    np.testing.assert_allclose(pmap_mirror.surface_v[:, ::-1][both],
                               pmap_direct.surface_v[both], atol=1e-9)


def test_map_points_lie_on_shell(geom, pmap_mirror):
    pts = pmap_mirror.points[pmap_mirror.valid]
    resid = (np.hypot(pts[:, 0], pts[:, 1]) + geom.axis_offset) ** 2 \
        + pts[:, 2] ** 2 - geom.generator_radius ** 2
    assert np.abs(resid).max() < 1e-6


def test_grid_equal_metric_density(geom, pmap_mirror):
    du = abs(pmap_mirror.grid_u[0] - pmap_mirror.grid_u[1])
    dv = abs(pmap_mirror.grid_v[1] - pmap_mirror.grid_v[0])
    assert du * geom.generator_radius == pytest.approx(
        dv * geom.max_radius, abs=1e-12)


def test_map_rejects_outside_camera(geom, cfg):
    bad = CameraModel(
        intrinsics=np.array([[200.0, 0.0, 320.0], [0.0, 200.0, 240.0],
                             [0.0, 0.0, 1.0]]),
        rotation=np.eye(3), translation=np.array([0.0, 0.0, 500.0]),
        resolution=(640, 480), fov_deg=90.0)
    from rolltact.optics import SurfaceMapError
    with pytest.raises(SurfaceMapError):
        build_surface_map(geom, bad, u_window=0.28, v_window=0.825, px_per_mm=6.0)


# ---------------------------------------------------------------------------
# Unwarp
# ---------------------------------------------------------------------------

def test_unwarp_constant_frame(cam_mirror, pmap_mirror):
    frame = np.full((480, 640, 3), 127, dtype=np.uint8)
    rect, mask = unwarp(frame, pmap_mirror, cam_mirror)
    assert rect.shape == (*pmap_mirror.grid_shape, 3)
    assert np.all(rect[mask] == 127)


def test_unwarp_shape_mismatch(cam_mirror, pmap_mirror):
    with pytest.raises(ShapeMismatchError):
        unwarp(np.zeros((100, 100, 3), dtype=np.uint8), pmap_mirror, cam_mirror)


def test_unwarp_iso_u_stripes_are_uniform_rows(cam_mirror, pmap_mirror):
    period = 0.07  # rad of u per stripe pair
    phase = np.mod(pmap_mirror.surface_u / period, 1.0)
    frame = np.where(phase < 0.5, 255, 0).astype(np.uint8)
    frame[~pmap_mirror.valid] = 0
    rect, mask = unwarp(frame, pmap_mirror, cam_mirror)
    profile = np.array([r[m].mean() if m.any() else 0.0
                        for r, m in zip(rect.astype(float), mask)])
    # Subpixel edge positions: linear interpolation through half-brightness.
    flips = np.nonzero(np.diff((profile > 127).astype(int)) != 0)[0]
    edges = np.array([i + (127.5 - profile[i]) / (profile[i + 1] - profile[i])
                      for i in flips])
    widths = np.diff(edges)[1:-1]  # drop the two possibly clipped end stripes
    assert len(widths) >= 6
    assert widths.std() / widths.mean() < 0.02
    # Interior rows should be near-uniform across columns.
    interior = rect.astype(float)[5:-5]
    spans = interior.max(axis=1) - interior.min(axis=1)
    assert np.median(spans) == 0.0


def test_unwarp_smooth_pattern_round_trip(cam_mirror, pmap_mirror):
    def pattern(u, v):
        return 0.5 + 0.25 * np.sin(9.0 * u) * np.cos(5.0 * v) \
            + 0.2 * np.sin(4.0 * v + 1.0)

    frame = pattern(pmap_mirror.surface_u, pmap_mirror.surface_v)
    frame = (np.clip(frame, 0, 1) * 255).astype(np.uint8)
    rect, mask = unwarp(frame, pmap_mirror, cam_mirror)
    uu, vv = np.meshgrid(pmap_mirror.grid_u, pmap_mirror.grid_v, indexing="ij")
    truth = (np.clip(pattern(uu, vv), 0, 1) * 255)
    err = (rect.astype(float) - truth)[mask]
    psnr = 10 * math.log10(255.0 ** 2 / max(1e-12, np.mean(err ** 2)))
    assert psnr > 35.0


# ---------------------------------------------------------------------------
# Calibration file round trip
# ---------------------------------------------------------------------------

def test_camera_file_round_trip(tmp_path, cam_mirror, cam_direct):
    for i, cam in enumerate((cam_mirror, cam_direct)):
        path = tmp_path / f"cam{i}.txt"
        save_camera(cam, path)
        loaded = load_camera(path)
        assert np.array_equal(loaded.intrinsics, cam.intrinsics)
        assert np.array_equal(loaded.rotation, cam.rotation)
        assert np.array_equal(loaded.translation, cam.translation)
        assert loaded.resolution == cam.resolution
        assert loaded.distortion == cam.distortion
        assert loaded.fov_deg == cam.fov_deg
        if cam.mirror is None:
            assert loaded.mirror is None
        else:
            assert np.array_equal(loaded.mirror.point, cam.mirror.point)
            assert np.array_equal(loaded.mirror.normal, cam.mirror.normal)
        second = tmp_path / f"cam{i}b.txt"
        save_camera(loaded, second)
        assert path.read_bytes() == second.read_bytes()


def test_camera_file_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("format_version 99\n")
    with pytest.raises(OpticsError):
        load_camera(bad)
    bad.write_text("resolution 640 480\n")
    with pytest.raises(OpticsError):
        load_camera(bad)
