"""Contact state extraction from a depth map and tracked markers."""

import math
from dataclasses import dataclass

import cv2
import numpy as np

from ..geometry import SurfaceCoord
from .depth import DepthImage
from .markers import MarkerMatch


@dataclass(frozen=True)
class ContactState:
    """Per-frame contact summary on the rectified grid.

    Pixel coordinates are (row, col); `centered_px` re-expresses the
    centroid relative to the window center for servo errors.  The full
    shear field is the tracked displacement at every reference marker.
    """
    in_contact: bool
    centroid_px: tuple[float, float] | None
    centroid: SurfaceCoord | None
    area_mm2: float
    max_depth_mm: float
    mean_shear_px: np.ndarray          # (2,)
    torsion_rad: float
    axes: np.ndarray                   # (2, 2) rows, major first
    extents_px: np.ndarray             # (2,)
    n_markers: int
    grid_shape: tuple[int, int]
    shear_points: np.ndarray = None    # (M, 2) marker positions, px
    shear_vectors: np.ndarray = None   # (M, 2) displacements, px
    depth: DepthImage = None

    @property
    def centered_px(self) -> tuple[float, float] | None:
        if self.centroid_px is None:
            return None
        return (self.centroid_px[0] - (self.grid_shape[0] - 1) / 2.0,
                self.centroid_px[1] - (self.grid_shape[1] - 1) / 2.0)

    @property
    def major_axis_angle_deg(self) -> float:
        """Major axis direction in the image plane, degrees in [0, 180)."""
        a = self.axes[0]
        ang = math.degrees(math.atan2(a[0], a[1]))
        return ang % 180.0


def _rigid_fit(r: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, float]:
    """Joint least squares of d = t + phi * (z x r) about the centroid.

    Returns (translation, rotation rate); decoupling keeps a pure twist
    from leaking into the mean shear and vice versa.
    """
    n = len(r)
    perp = np.column_stack([-r[:, 1], r[:, 0]])
    a = np.zeros((3, 3))
    a[0, 0] = a[1, 1] = n
    a[0, 2] = a[2, 0] = perp[:, 0].sum()
    a[1, 2] = a[2, 1] = perp[:, 1].sum()
    a[2, 2] = (perp ** 2).sum()
    b = np.array([d[:, 0].sum(), d[:, 1].sum(), (perp * d).sum()])
    try:
        t0, t1, phi = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        return d.mean(axis=0), 0.0
    return np.array([t0, t1]), float(phi)


def contact_summary(depth: DepthImage, match: MarkerMatch | None,
                    ref_markers: np.ndarray | None, grid_u: np.ndarray,
                    grid_v: np.ndarray, px_per_mm: float,
                    shear_dilate_px: int = 12) -> ContactState:
    """Summarize one frame.  With no contact, geometric fields are zeroed.

    Shear and torsion are taken over matched markers in the dilated contact
    region: mean displacement, and the least-squares rigid rotation rate of
    displacements about the centroid.
    """
    values = depth.values
    mask = values > 0.0
    n_u, n_v = values.shape
    mean_shear = np.zeros(2)
    torsion = 0.0
    n_markers = 0

    shear_points = np.zeros((0, 2))
    shear_vectors = np.zeros((0, 2))
    if match is not None and ref_markers is not None and len(ref_markers):
        hit = match.assignment >= 0
        shear_points = np.asarray(ref_markers)[hit]
        shear_vectors = match.displacements[hit]

    if not mask.any():
        return ContactState(in_contact=False, centroid_px=None, centroid=None,
                            area_mm2=0.0, max_depth_mm=0.0,
                            mean_shear_px=mean_shear, torsion_rad=0.0,
                            axes=np.eye(2), extents_px=np.zeros(2),
                            n_markers=0, grid_shape=(n_u, n_v),
                            shear_points=shear_points,
                            shear_vectors=shear_vectors, depth=depth)

    w = values * mask
    total = w.sum()
    rr, cc = np.mgrid[0:n_u, 0:n_v]
    crow = float((rr * w).sum() / total)
    ccol = float((cc * w).sum() / total)
    du = abs(grid_u[1] - grid_u[0])
    dv = abs(grid_v[1] - grid_v[0])
    centroid = SurfaceCoord(float(grid_u[0]) - crow * du,
                            float(grid_v[0]) + ccol * dv)

    # Depth-weighted second moments: discounts the ragged threshold rim.
    dr = rr - crow
    dc = cc - ccol
    second = np.array([[float((w * dr * dr).sum()), float((w * dr * dc).sum())],
                       [float((w * dr * dc).sum()), float((w * dc * dc).sum())]])
    second /= total
    evals, evecs = np.linalg.eigh(second)
    order = np.argsort(evals)[::-1]
    axes = evecs[:, order].T
    extents = 2.0 * np.sqrt(np.maximum(evals[order], 0.0))

    if match is not None and ref_markers is not None and len(ref_markers):
        kernel = cv2.getStructuringElement(
            cv2.MORPH_ELLIPSE, (2 * shear_dilate_px + 1,) * 2)
        near = cv2.dilate(mask.astype(np.uint8), kernel).astype(bool)
        pos = np.asarray(ref_markers)
        rows = np.clip(np.round(pos[:, 0]).astype(int), 0, n_u - 1)
        cols = np.clip(np.round(pos[:, 1]).astype(int), 0, n_v - 1)
        inside = near[rows, cols] & (match.assignment >= 0)
        n_markers = int(inside.sum())
        if n_markers:
            mean_shear, torsion = _rigid_fit(
                pos[inside] - np.array([crow, ccol]),
                match.displacements[inside])

    return ContactState(
        in_contact=True, centroid_px=(crow, ccol), centroid=centroid,
        area_mm2=float(mask.sum()) / px_per_mm ** 2,
        max_depth_mm=float(values.max()), mean_shear_px=mean_shear,
        torsion_rad=torsion, axes=axes, extents_px=extents,
        n_markers=n_markers, grid_shape=(n_u, n_v),
        shear_points=shear_points, shear_vectors=shear_vectors, depth=depth)
