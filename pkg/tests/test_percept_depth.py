"""Depth recovery tests: Poisson solves, inpainting, photometric closure."""

import math

import cv2
import numpy as np
import pytest

from rolltact.geometry import Pose
from rolltact.optics import unwarp
from rolltact.percept import (
    DepthImage,
    SolveInfo,
    inpaint_markers,
    marker_mask,
    photometric_depth,
    poisson_integrate,
    reconstruct_3d,
)
from rolltact.percept.depth import DepthError
from rolltact.synth import SceneSpec, Sphere, Union, render_frame

ENTRY_ANGLE = math.radians(46.0)


def forward_gradient(h: np.ndarray) -> np.ndarray:
    """Independent loop-built forward differences of a height field."""
    n, m = h.shape
    g = np.zeros((n, m, 2))
    for i in range(n - 1):
        g[i, :, 0] = h[i + 1, :] - h[i, :]
    for j in range(m - 1):
        g[:, j, 1] = h[:, j + 1] - h[:, j]
    return g


def render_pair(rig, shape):
    """Rectified contact frame and same-angle reference, plus ground truth."""
    scene = SceneSpec(shape=shape, roller_angle=ENTRY_ANGLE)
    frame, truth = render_frame(scene, rig)
    ref_frame, _ = render_frame(SceneSpec(roller_angle=ENTRY_ANGLE), rig)
    rect, _ = unwarp(frame.image, rig.pmap, rig.cam)
    ref, _ = unwarp(ref_frame.image, rig.pmap, rig.cam)
    mmask = marker_mask(rect.shape[:2], truth.markers_cur,
                        0.55 * rig.pmap.px_per_mm)
    return rect, ref, mmask, truth


def ball(overlap_mm, radius_mm=8.0, y=0.0, z=0.0):
    x = math.sqrt((20.0 + radius_mm - overlap_mm) ** 2 - y * y - z * z)
    return Sphere(pose=Pose(np.eye(3), np.array([x, y, z])),
                  radius=radius_mm)


# ---------------------------------------------------------------------------
# Poisson integration
# ---------------------------------------------------------------------------

def test_poisson_zero_gradient():
    h, info = poisson_integrate(np.zeros((17, 23, 2)))
    assert np.all(h == 0.0)
    assert info.method == "dst"
    assert info.converged


def test_poisson_recovers_sine_eigenfunction():
    n = 64
    i = np.arange(n) / (n - 1)
    h = np.outer(np.sin(math.pi * 2 * i), np.sin(math.pi * 3 * i))
    h[0, :] = h[-1, :] = h[:, 0] = h[:, -1] = 0.0
    got, info = poisson_integrate(forward_gradient(h))
    assert info.method == "dst"
    rel = np.abs(got - h).max() / np.abs(h).max()
    assert rel < 1e-6


def test_poisson_matches_dense_direct_solve():
    rng = np.random.default_rng(4)
    n = 16
    grad = rng.normal(size=(n, n, 2))
    got, _ = poisson_integrate(grad)

    # Independent route: explicit 5-point Dirichlet system on the interior.
    div = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            div[i, j] = grad[i, j, 0] - (grad[i - 1, j, 0] if i else 0.0) \
                + grad[i, j, 1] - (grad[i, j - 1, 1] if j else 0.0)
    interior = [(i, j) for i in range(1, n - 1) for j in range(1, n - 1)]
    index = {ij: k for k, ij in enumerate(interior)}
    a = np.zeros((len(interior), len(interior)))
    b = np.zeros(len(interior))
    for (i, j), k in index.items():
        a[k, k] = -4.0
        b[k] = div[i, j]
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nb = index.get((i + di, j + dj))
            if nb is not None:
                a[k, nb] = 1.0
    x = np.linalg.solve(a, b)
    dense = np.zeros((n, n))
    for (i, j), k in index.items():
        dense[i, j] = x[k]
    assert np.abs(got - dense).max() < 1e-8


def test_poisson_linear():
    rng = np.random.default_rng(11)
    g1 = rng.normal(size=(20, 24, 2))
    g2 = rng.normal(size=(20, 24, 2))
    h1, _ = poisson_integrate(g1)
    h2, _ = poisson_integrate(g2)
    h12, _ = poisson_integrate(g1 + 2.0 * g2)
    assert np.abs(h12 - (h1 + 2.0 * h2)).max() < 1e-9


def test_poisson_masked_cg_fallback():
    n = 48
    rr, cc = np.mgrid[0:n, 0:n]
    r2 = (rr - n / 2) ** 2 + (cc - n / 2) ** 2
    h = np.maximum(0.0, 1.0 - r2 / 12.0 ** 2) ** 2
    mask = r2 < 20.0 ** 2
    got, info = poisson_integrate(forward_gradient(h), mask=mask)
    assert info.method == "cg"
    assert info.converged
    assert info.iterations > 0
    assert info.residual < 1e-8
    assert np.abs(got - h).max() < 1e-6


def test_poisson_rejects_bad_inputs():
    with pytest.raises(DepthError):
        poisson_integrate(np.zeros((5, 5, 3)))
    with pytest.raises(DepthError):
        poisson_integrate(np.zeros((2, 5, 2)))
    with pytest.raises(DepthError):
        poisson_integrate(np.zeros((8, 8, 2)), mask=np.ones((7, 8), bool))


# ---------------------------------------------------------------------------
# Inpainting
# ---------------------------------------------------------------------------

def test_inpaint_fills_disks_from_smooth_surroundings():
    n, m = 80, 100
    rr, cc = np.mgrid[0:n, 0:m]
    img = np.stack([0.2 + 0.4 * cc / m, 0.3 + 0.3 * rr / n,
                    np.full((n, m), 0.5)], axis=-1)
    holes = np.zeros((n, m), bool)
    for r0, c0 in ((20, 30), (50, 70), (40, 40)):
        holes |= (rr - r0) ** 2 + (cc - c0) ** 2 < 4.5 ** 2
    corrupted = img.copy()
    corrupted[holes] = 0.0
    filled = inpaint_markers(corrupted, holes)
    assert np.abs(filled[holes] - img[holes]).max() < 0.03
    assert np.array_equal(filled[~holes], img[~holes].astype(np.float32))


def test_inpaint_mask_shape_mismatch():
    with pytest.raises(DepthError):
        inpaint_markers(np.zeros((6, 6, 3)), np.zeros((5, 6), bool))


# ---------------------------------------------------------------------------
# Photometric depth
# ---------------------------------------------------------------------------

def test_photometric_identical_frames_yield_zero(rig, spin360):
    frame = spin360[46][1]
    rect, _ = unwarp(frame.image, rig.pmap, rig.cam)
    depth = photometric_depth(rect, rect, rig.lights, rig.pmap.px_per_mm,
                              exclude_rows=rig.encoder_band_px + 2)
    assert np.all(depth.values == 0.0)
    assert not depth.saturated


def test_photometric_hemisphere_accuracy(rig):
    rect, ref, mmask, truth = render_pair(rig, ball(1.5))
    depth = photometric_depth(
        rect, ref, rig.lights, rig.pmap.px_per_mm, marker_mask=mmask,
        exclude_rows=rig.encoder_band_px + 2)
    err = depth.values - truth.depth
    rmse = float(np.sqrt(np.mean(err ** 2)))
    assert truth.depth.max() == pytest.approx(1.35, abs=0.25)
    assert rmse < 0.02 * 1.5
    # Depth-weighted centroids of estimate and truth must agree closely.
    w = depth.values
    rr, cc = np.mgrid[0:w.shape[0], 0:w.shape[1]]
    crow = (rr * w).sum() / w.sum()
    ccol = (cc * w).sum() / w.sum()
    assert abs(crow - truth.centroid_px[0]) < 2.0
    assert abs(ccol - truth.centroid_px[1]) < 2.0


def test_photometric_disjoint_contacts_superpose(rig):
    pair = Union(shapes=(ball(0.8, radius_mm=5.0, y=14.0),
                         ball(0.8, radius_mm=5.0, y=-14.0)))
    rect, ref, mmask, truth = render_pair(rig, pair)
    depth = photometric_depth(
        rect, ref, rig.lights, rig.pmap.px_per_mm, marker_mask=mmask,
        exclude_rows=rig.encoder_band_px + 2)
    blobs = (depth.values > 0.1).astype(np.uint8)
    n_labels, _ = cv2.connectedComponents(blobs)
    assert n_labels - 1 == 2
    assert np.abs(depth.values - truth.depth).max() < 0.1


def test_photometric_flags_saturated_pixels(rig):
    # Clamp a block inside a real contact blob: depth and saturation overlap.
    rect, ref, mmask, truth = render_pair(rig, ball(1.5))
    crow, ccol = (int(round(x)) for x in truth.centroid_px)
    dark = rect.copy()
    dark[crow - 8:crow + 8, ccol - 8:ccol + 8] = 0
    depth = photometric_depth(
        dark, ref, rig.lights, rig.pmap.px_per_mm, marker_mask=mmask,
        exclude_rows=rig.encoder_band_px + 2)
    assert depth.saturated
    clean = photometric_depth(
        rect, ref, rig.lights, rig.pmap.px_per_mm, marker_mask=mmask,
        exclude_rows=rig.encoder_band_px + 2)
    assert not clean.saturated


def test_photometric_clamps_overdeep(rig):
    rect, ref, mmask, _ = render_pair(rig, ball(1.5))
    depth = photometric_depth(
        rect, ref, rig.lights, rig.pmap.px_per_mm, marker_mask=mmask,
        exclude_rows=rig.encoder_band_px + 2, max_depth_mm=0.5)
    assert depth.saturated
    assert depth.values.max() <= 0.5 + 1e-12


def test_photometric_shape_mismatch(rig):
    with pytest.raises(DepthError):
        photometric_depth(np.zeros((5, 6, 3)), np.zeros((6, 6, 3)),
                          rig.lights, 6.0)


# ---------------------------------------------------------------------------
# 3D lift
# ---------------------------------------------------------------------------

def depth_image(values: np.ndarray) -> DepthImage:
    return DepthImage(values=values, valid=np.ones(values.shape, bool),
                      saturated=False, solve=SolveInfo("dst", True, 0, 0.0))


def test_reconstruct_zero_depth_empty(rig):
    pts, normals = reconstruct_3d(
        depth_image(np.zeros(rig.pmap.grid_shape)), rig.pmap.grid_u,
        rig.pmap.grid_v, rig.geom.generator_radius, rig.geom.axis_offset)
    assert pts.shape == (0, 3)
    assert normals.shape == (0, 3)


def test_reconstruct_uniform_depth_offsets_shell(rig):
    n_u, n_v = rig.pmap.grid_shape
    delta = 0.2
    pts, normals = reconstruct_3d(
        depth_image(np.full((n_u, n_v), delta)), rig.pmap.grid_u,
        rig.pmap.grid_v, rig.geom.generator_radius, rig.geom.axis_offset)
    assert len(pts) == n_u * n_v
    assert np.allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12)
    shell = pts + delta * normals
    # Pushed back out along the normal, every point satisfies the shell
    # equation rho = R cos(u) - d with z = R sin(u).
    u = np.arcsin(shell[:, 2] / rig.geom.generator_radius)
    rho = rig.geom.generator_radius * np.cos(u) - rig.geom.axis_offset
    assert np.allclose(np.hypot(shell[:, 0], shell[:, 1]), rho, atol=1e-9)


def test_reconstruct_hemisphere_matches_truth_surface(rig):
    rect, ref, mmask, truth = render_pair(rig, ball(1.5))
    depth = photometric_depth(
        rect, ref, rig.lights, rig.pmap.px_per_mm, marker_mask=mmask,
        exclude_rows=rig.encoder_band_px + 2)
    pts, normals = reconstruct_3d(depth, rig.pmap.grid_u, rig.pmap.grid_v,
                                  rig.geom.generator_radius,
                                  rig.geom.axis_offset)
    # Ground-truth deformed surface at the same cells.
    mask = depth.values > 0.0
    gt = pts + (depth.values[mask] - truth.depth[mask])[:, None] * normals
    rms = math.sqrt(float(np.mean(np.sum((pts - gt) ** 2, axis=1))))
    assert rms < 0.05
