"""Depth recovery from shading: photometric inversion plus Poisson integration.

The renderer shades with forward-difference gradients of the indentation
height field, so the inverse runs the matching discrete chain: per-pixel
normals from the color difference image, gradients from the normal ratios,
a backward-difference divergence, and a discrete sine transform solve of
the Dirichlet Poisson problem.  Contact-free borders make the zero boundary
condition exact.
"""

import math
from dataclasses import dataclass

import cv2
import numpy as np
import scipy.fft
import scipy.sparse
import scipy.sparse.linalg

from ..synth import LightingModel


class DepthError(ValueError):
    """Depth recovery preconditions violated."""


@dataclass(frozen=True)
class SolveInfo:
    method: str            # "dst" or "cg"
    converged: bool
    iterations: int
    residual: float


@dataclass(frozen=True)
class DepthImage:
    """Recovered indentation map in mm, zero outside contact."""
    values: np.ndarray
    valid: np.ndarray
    saturated: bool
    solve: SolveInfo


# ---------------------------------------------------------------------------
# Poisson integration
# ---------------------------------------------------------------------------

def _divergence(grad: np.ndarray) -> np.ndarray:
    """Backward-difference divergence of a forward-difference gradient field."""
    ga = grad[..., 0]
    gb = grad[..., 1]
    div = np.zeros_like(ga)
    div += np.diff(ga, axis=0, prepend=0.0)
    div += np.diff(gb, axis=1, prepend=0.0)
    return div


def _solve_dst(div: np.ndarray) -> np.ndarray:
    n, m = div.shape
    f = div[1:-1, 1:-1]
    F = scipy.fft.dstn(f, type=1, workers=-1)
    ka = np.arange(1, n - 1)
    kb = np.arange(1, m - 1)
    lam = (2.0 * np.cos(math.pi * ka / (n - 1)) - 2.0)[:, None] \
        + (2.0 * np.cos(math.pi * kb / (m - 1)) - 2.0)[None, :]
    h = np.zeros((n, m))
    h[1:-1, 1:-1] = scipy.fft.idstn(F / lam, type=1, workers=-1)
    return h


def _solve_masked(div: np.ndarray, mask: np.ndarray):
    """Conjugate-gradient Dirichlet solve restricted to the mask interior."""
    n, m = div.shape
    interior = mask.copy()
    interior[0, :] = interior[-1, :] = False
    interior[:, 0] = interior[:, -1] = False
    interior &= mask & np.roll(mask, 1, 0) & np.roll(mask, -1, 0) \
        & np.roll(mask, 1, 1) & np.roll(mask, -1, 1)
    idx = -np.ones((n, m), dtype=int)
    nodes = np.argwhere(interior)
    if len(nodes) == 0:
        return np.zeros((n, m)), SolveInfo("cg", True, 0, 0.0)
    idx[interior] = np.arange(len(nodes))
    rows, cols, vals = [], [], []
    for k, (i, j) in enumerate(nodes):
        rows.append(k)
        cols.append(k)
        vals.append(-4.0)
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nb = idx[i + di, j + dj]
            if nb >= 0:
                rows.append(k)
                cols.append(nb)
                vals.append(1.0)
    lap = scipy.sparse.csr_matrix((vals, (rows, cols)),
                                  shape=(len(nodes), len(nodes)))
    b = div[interior]
    n_iter = 0

    def count(_):
        nonlocal n_iter
        n_iter += 1

    x, info = scipy.sparse.linalg.cg(lap, b, rtol=1e-10, maxiter=4000,
                                     callback=count)
    residual = float(np.linalg.norm(lap @ x - b)
                     / max(np.linalg.norm(b), 1e-30))
    h = np.zeros((n, m))
    h[interior] = x
    return h, SolveInfo("cg", info == 0, n_iter, residual)


def poisson_integrate(grad: np.ndarray, mask: np.ndarray | None = None):
    """Height field with zero boundary from a gradient field, channels (a, b).

    Full-rectangle masks take the O(N log N) sine-transform path; any other
    mask falls back to a masked conjugate-gradient solve and reports its
    convergence.  Returns (height, SolveInfo).
    """
    grad = np.asarray(grad, dtype=float)
    if grad.ndim != 3 or grad.shape[-1] != 2:
        raise DepthError("gradient field must have shape (n, m, 2)")
    n, m = grad.shape[:2]
    if n < 3 or m < 3:
        raise DepthError("gradient field too small to integrate")
    div = _divergence(grad)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n, m):
            raise DepthError("mask shape must match the gradient field")
    if mask is None or bool(np.all(mask)):
        return _solve_dst(div), SolveInfo("dst", True, 0, 0.0)
    return _solve_masked(div, mask)


# ---------------------------------------------------------------------------
# Marker inpainting
# ---------------------------------------------------------------------------

def inpaint_markers(img: np.ndarray, mask: np.ndarray,
                    sigma_px: float = 3.0) -> np.ndarray:
    """Fill masked pixels by smooth interpolation from their surroundings.

    Normalized convolution: a Gaussian-weighted average of unmasked
    neighbors.  Masked regions are marker-sized disks, so the boundary is
    always within a couple of kernel widths.  Works per channel on floats.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.shape != img.shape[:2]:
        raise DepthError("inpaint mask must match the image grid")
    out = np.array(img, dtype=np.float32, copy=True)
    if not mask.any():
        return out
    w = (~mask).astype(np.float32)
    weighted = cv2.GaussianBlur(out * w[..., None], (0, 0), sigma_px)
    norm = cv2.GaussianBlur(w, (0, 0), sigma_px)
    fill = weighted / np.maximum(norm, 1e-6)[..., None]
    out[mask] = fill[mask]
    return out


# ---------------------------------------------------------------------------
# Photometric depth
# ---------------------------------------------------------------------------

def photometric_depth(cur: np.ndarray, ref: np.ndarray, lights: LightingModel,
                      px_per_mm: float, *, marker_mask: np.ndarray | None = None,
                      exclude_rows: int = 0, threshold_mm: float = 0.012,
                      max_depth_mm: float = 3.0) -> DepthImage:
    """Indentation map from a rectified frame and its contact-free reference.

    Both images are rectified RGB, uint8 or float in [0, 1].  The difference
    image is inpainted over the marker mask, inverted through the light
    channel matrix to per-pixel normals, and integrated.  Depths shallower
    than the threshold are zeroed; depths beyond the physical maximum are
    clamped and flagged.
    """
    cur_f = _as_float(cur)
    ref_f = _as_float(ref)
    if cur_f.shape != ref_f.shape:
        raise DepthError("frame and reference shapes differ")
    saturated_px = np.any((cur_f >= 254.5 / 255.0) | (cur_f <= 0.5 / 255.0),
                          axis=-1)
    diff = cur_f - ref_f
    if exclude_rows > 0:
        diff[:exclude_rows] = 0.0
    if marker_mask is not None and marker_mask.any():
        # Away from contact and shear, frame and reference markers cancel
        # in the difference, so only disks near significant differences
        # need inpainting.
        sig = (np.abs(diff).max(axis=-1) > 4.0 / 255.0).astype(np.uint8)
        near = cv2.dilate(sig, np.ones((21, 21), np.uint8)).astype(bool)
        active = marker_mask & near
        if active.any():
            diff = inpaint_markers(diff, active)

    inv = np.linalg.inv(lights.channel_matrix)
    n0 = np.array([0.0, 0.0, 1.0])
    normals = n0 + diff @ inv.T
    nz = np.maximum(normals[..., 2], 0.2)
    hx = -normals[..., 0] / nz
    hy = -normals[..., 1] / nz

    delta = 1.0 / px_per_mm
    grad = np.stack([-hx * delta, hy * delta], axis=-1)
    h, info = poisson_integrate(grad)
    depth = np.clip(-h, 0.0, None)
    depth[depth < threshold_mm] = 0.0
    saturated = bool(np.any(saturated_px & (depth > 0)))
    over = depth > max_depth_mm
    if over.any():
        depth = np.minimum(depth, max_depth_mm)
        saturated = True
    valid = np.ones(depth.shape, dtype=bool)
    if exclude_rows > 0:
        valid[:exclude_rows] = False
    return DepthImage(values=depth, valid=valid, saturated=saturated,
                      solve=info)


def _as_float(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise DepthError("expected an (n, m, 3) image")
    if arr.dtype == np.uint8:
        return arr.astype(float) / 255.0
    return arr.astype(float)


# ---------------------------------------------------------------------------
# 3D lift
# ---------------------------------------------------------------------------

def reconstruct_3d(depth: DepthImage, grid_u: np.ndarray, grid_v: np.ndarray,
                   generator_radius: float, axis_offset: float):
    """Contact point cloud: surface points pushed inward by the depth map.

    Returns (points, normals) for cells with positive depth; normals are the
    outward shell normals at those cells.
    """
    mask = depth.values > 0.0
    if not mask.any():
        return np.zeros((0, 3)), np.zeros((0, 3))
    uu, vv = np.meshgrid(grid_u, grid_v, indexing="ij")
    u = uu[mask]
    v = vv[mask]
    rho = generator_radius * np.cos(u) - axis_offset
    pts = np.column_stack([rho * np.cos(v), -rho * np.sin(v),
                           generator_radius * np.sin(u)])
    cu = np.cos(u)
    normals = np.column_stack([cu * np.cos(v), -cu * np.sin(v), np.sin(u)])
    d = depth.values[mask]
    return pts - d[:, None] * normals, normals
