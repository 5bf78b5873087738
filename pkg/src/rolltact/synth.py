"""Synthetic tactile-frame renderer standing in for the physical sensor.

Rendering happens on the rectified (u, v) grid and is then warped into the
camera: object penetration into the elastomer is computed along the inward
surface normal, smoothed by a compliance kernel, converted to tangent-frame
normals by forward differences, shaded per color channel, composited with
the marker array and the encoder strip, resampled to the raw camera view,
and quantized to 8 bits.  Every step is deterministic given the scene seed.

Tangent frame at a surface point: x along increasing u (longitudinal), y
along increasing v (circumferential), z along the outward normal.  Light
directions are expressed in this frame.
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .config import Config
from .geometry import (
    Pose,
    RollerGeometry,
    SurfaceCoord,
    geometry_from_config,
    wrap_angle,
)
from .optics import CameraModel, PixelSurfaceMap, camera_from_config, \
    surface_map_from_config

TWO_PI = 2.0 * math.pi
BACKGROUND = 0.03  # shade of out-of-window housing in the raw view


class SceneError(ValueError):
    """Scene violates a renderer precondition (e.g. over-deep indentation)."""


# ---------------------------------------------------------------------------
# Lighting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LightingModel:
    """Three directional sources (red, blue, green) plus an ambient term."""
    directions: np.ndarray    # 3x3, rows are unit tangent-frame directions
    intensities: np.ndarray   # 3
    ambient: float

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=float)
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(norms <= 0):
            raise ValueError("light directions must be nonzero")
        d = d / norms
        i = np.asarray(self.intensities, dtype=float)
        if np.any(i < 0) or self.ambient < 0:
            raise ValueError("intensities must be nonnegative")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "intensities", i)
        cond = np.linalg.cond(self.channel_matrix)
        if cond >= 50.0:
            raise ValueError(f"light channel matrix ill-conditioned: {cond:.1f}")

    @property
    def channel_matrix(self) -> np.ndarray:
        """Rows map a surface normal to per-channel shading slope."""
        return self.directions * self.intensities[:, None]

    def shade(self, normals: np.ndarray) -> np.ndarray:
        """Lambertian shading of unit tangent-frame normals, (..., 3)."""
        lam = np.einsum("...k,ck->...c", normals, self.directions)
        return self.ambient + np.maximum(lam, 0.0) * self.intensities

    def reference_shading(self) -> np.ndarray:
        return self.shade(np.array([0.0, 0.0, 1.0]))


def lighting_from_config(cfg: Config) -> LightingModel:
    return LightingModel(
        directions=np.array([cfg.get_vec("lights", "red_dir"),
                             cfg.get_vec("lights", "blue_dir"),
                             cfg.get_vec("lights", "green_dir")]),
        intensities=np.full(3, cfg.get_float("lights", "intensity")),
        ambient=cfg.get_float("lights", "ambient"),
    )


# ---------------------------------------------------------------------------
# Shapes (signed distance fields in the stator frame)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Shape:
    """Posed solid; subclasses define the local signed distance field."""
    pose: Pose = field(default_factory=Pose.identity)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return self.sdf_local(self.pose.inverse().transform(points))

    def sdf_local(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Sphere(Shape):
    radius: float = 10.0

    def sdf_local(self, p):
        return np.linalg.norm(p, axis=-1) - self.radius


@dataclass(frozen=True)
class Cylinder(Shape):
    """Finite cylinder along the local z axis."""
    radius: float = 5.0
    half_length: float = 50.0

    def sdf_local(self, p):
        dr = np.hypot(p[..., 0], p[..., 1]) - self.radius
        dz = np.abs(p[..., 2]) - self.half_length
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        return outside + np.minimum(np.maximum(dr, dz), 0.0)


@dataclass(frozen=True)
class Box(Shape):
    half_extents: tuple[float, float, float] = (10.0, 10.0, 10.0)

    def sdf_local(self, p):
        q = np.abs(p) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)


@dataclass(frozen=True)
class Cable(Shape):
    """Circular cross-section swept along a local polyline."""
    points: np.ndarray = field(default_factory=lambda: np.zeros((2, 3)))
    radius: float = 2.0

    def sdf_local(self, p):
        pts = np.asarray(self.points, dtype=float)
        a, b = pts[:-1], pts[1:]
        ab = b - a                                        # (S, 3)
        pa = p[..., None, :] - a                          # (..., S, 3)
        denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-12)
        t = np.clip(np.sum(pa * ab, axis=-1) / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        d = np.linalg.norm(p[..., None, :] - closest, axis=-1)
        return d.min(axis=-1) - self.radius


@dataclass(frozen=True)
class CapsuleSet(Shape):
    """Union of independent capsules (spheres swept along line segments).

    Unlike Cable the segments are not chained, so disconnected stroke sets
    such as embossed glyphs can live in a single shape.
    """
    segments: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 3)))
    radius: float = 0.5

    def sdf_local(self, p):
        seg = np.asarray(self.segments, dtype=float)
        if len(seg) == 0:
            return np.full(p.shape[:-1], np.inf)
        a, b = seg[:, 0], seg[:, 1]
        ab = b - a                                        # (S, 3)
        pa = p[..., None, :] - a                          # (..., S, 3)
        denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-12)
        t = np.clip(np.sum(pa * ab, axis=-1) / denom, 0.0, 1.0)
        d = np.linalg.norm(pa - t[..., None] * ab, axis=-1)
        return d.min(axis=-1) - self.radius


@dataclass(frozen=True)
class PrismProfile(Shape):
    """2D polygon extruded along the local z axis."""
    polygon: np.ndarray = field(default_factory=lambda: np.zeros((3, 2)))
    half_length: float = 50.0

    def sdf_local(self, p):
        poly = np.asarray(self.polygon, dtype=float)
        xy = p[..., :2]
        a, b = poly, np.roll(poly, -1, axis=0)
        e = b - a                                          # (E, 2)
        w = xy[..., None, :] - a                           # (..., E, 2)
        t = np.clip(np.sum(w * e, axis=-1)
                    / np.maximum(np.sum(e * e, axis=-1), 1e-12), 0.0, 1.0)
        d = np.linalg.norm(w - t[..., None] * e, axis=-1).min(axis=-1)
        # Even-odd crossing test for the sign.
        cond1 = (a[:, 1] <= xy[..., None, 1]) & (xy[..., None, 1] < b[:, 1])
        cond2 = (b[:, 1] <= xy[..., None, 1]) & (xy[..., None, 1] < a[:, 1])
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = a[:, 0] + (xy[..., None, 1] - a[:, 1]) \
                / np.where(e[:, 1] == 0, np.inf, e[:, 1]) * e[:, 0]
        inside = np.sum((cond1 | cond2) & (xy[..., None, 0] < x_cross),
                        axis=-1) % 2 == 1
        d2 = np.where(inside, -d, d)
        dz = np.abs(p[..., 2]) - self.half_length
        outside = np.hypot(np.maximum(d2, 0.0), np.maximum(dz, 0.0))
        return outside + np.minimum(np.maximum(d2, dz), 0.0)


@dataclass(frozen=True)
class EmbossedCylinder(Shape):
    """Cylinder shell with raised dome bumps (approximate SDF, exact sign)."""
    radius: float = 35.0
    half_length: float = 60.0
    bump_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    bump_radius: float = 2.5          # angular extent scaled by radius, mm
    bump_height: float = 0.8

    def sdf_local(self, p):
        base = Cylinder(radius=self.radius,
                        half_length=self.half_length).sdf_local(p)
        if len(self.bump_centers) == 0:
            return base
        theta = np.arctan2(p[..., 1], p[..., 0])
        z = p[..., 2]
        centers = np.asarray(self.bump_centers, dtype=float)
        dth = np.abs(np.angle(np.exp(1j * (theta[..., None] - centers[:, 0]))))
        arc = dth * self.radius
        dist2 = arc ** 2 + (z[..., None] - centers[:, 1]) ** 2
        lobe = np.exp(-dist2 / (2.0 * self.bump_radius ** 2))
        return base - self.bump_height * lobe.max(axis=-1)


@dataclass(frozen=True)
class Union(Shape):
    shapes: tuple[Shape, ...] = ()

    def sdf_local(self, p):
        return np.min(np.stack([s.sdf(p) for s in self.shapes]), axis=0)


def card_stack(bottom_edge_z: float, n_cards: int = 5, thickness: float = 0.3,
               bottom_face_x: float = 19.2, stagger: float = 4.5,
               half_width: float = 20.0) -> Union:
    """Fanned stack of thin cards pressing the window from +x.

    Card 0 is nearest the sensor; each card above sticks out past it by the
    stagger, so the indentation reads as a staircase of edges stepping one
    card thickness per edge.  The bottom edge is the deepest, moving feature.
    """
    cards = []
    for j in range(n_cards):
        face = bottom_face_x + j * thickness
        edge = bottom_edge_z + j * stagger
        half_z = 0.5 * (edge + 40.0)
        center = np.array([face + 0.5 * thickness, 0.0, edge - half_z])
        cards.append(Box(pose=Pose(np.eye(3), center),
                         half_extents=(0.5 * thickness, half_width, half_z)))
    return Union(shapes=tuple(cards))


# Seven-segment stroke font for embossed digits.  Endpoints live in a unit
# box with s along the card feed axis and t along the roller axis.
_SEGMENT_ENDPOINTS = {
    "a": ((0.0, 1.0), (1.0, 1.0)),
    "b": ((1.0, 1.0), (1.0, 0.5)),
    "c": ((1.0, 0.5), (1.0, 0.0)),
    "d": ((0.0, 0.0), (1.0, 0.0)),
    "e": ((0.0, 0.5), (0.0, 0.0)),
    "f": ((0.0, 1.0), (0.0, 0.5)),
    "g": ((0.0, 0.5), (1.0, 0.5)),
}
_DIGIT_SEGMENTS = ("abcdef", "bc", "abged", "abgcd", "fgbc",
                   "afgcd", "afgedc", "abc", "abcdefg", "abcdfg")


def digit_strokes(digit: int, width: float, height: float) -> np.ndarray:
    """Stroke endpoints of one seven-segment digit, (S, 2, 2) in mm."""
    if not 0 <= int(digit) <= 9:
        raise ValueError("digit must be a single decimal digit")
    scale = np.array([width, height])
    segs = []
    for name in _DIGIT_SEGMENTS[int(digit)]:
        p0, p1 = _SEGMENT_ENDPOINTS[name]
        segs.append([np.asarray(p0) * scale, np.asarray(p1) * scale])
    return np.asarray(segs)


@dataclass(frozen=True)
class DigitLayout:
    """Embossed digit row on a card face, in card coordinates (mm).

    The row is centred on the roller equator so the rolling-contact metric
    used when stacking strips is exact where the glyphs live.
    """
    digits: tuple[int, ...] = (4, 0, 1, 9)
    origin: tuple[float, float] = (-12.0, -3.0)   # lower-left (feed, axial)
    size: tuple[float, float] = (3.2, 5.0)        # glyph width, height
    pitch: float = 6.0                            # origin-to-origin spacing
    stroke_radius: float = 0.45                   # capsule relief radius

    def stroke_segments(self, face_x: float) -> np.ndarray:
        """All stroke endpoints placed on the plane x = face_x, (S, 2, 3)."""
        segs = []
        for i, digit in enumerate(self.digits):
            for p0, p1 in digit_strokes(digit, *self.size):
                y0 = self.origin[0] + i * self.pitch
                segs.append([[face_x, y0 + p0[0], self.origin[1] + p0[1]],
                             [face_x, y0 + p1[0], self.origin[1] + p1[1]]])
        return np.asarray(segs)

    def relief_centroids(self, samples_per_mm: int = 25) -> np.ndarray:
        """Relief-weighted centroid of each glyph, (N, 2) card (y, z) mm.

        Relief of a capsule stroke at in-plane distance d from its axis is
        sqrt(r^2 - d^2); overlapping strokes take the nearest axis, exactly
        matching the union of capsules seen by the renderer.
        """
        w, h = self.size
        r = self.stroke_radius
        step = 1.0 / samples_per_mm
        pad = r + 2.0 * step
        # Sample symmetrically about the glyph centre so symmetric glyphs
        # get exactly centred reliefs.
        nw = int(np.ceil((0.5 * w + pad) / step))
        nh = int(np.ceil((0.5 * h + pad) / step))
        ss = 0.5 * w + step * np.arange(-nw, nw + 1)
        tt = 0.5 * h + step * np.arange(-nh, nh + 1)
        grid = np.stack(np.meshgrid(ss, tt, indexing="ij"), axis=-1)
        out = []
        for i, digit in enumerate(self.digits):
            segs = digit_strokes(digit, w, h)
            a, b = segs[:, 0], segs[:, 1]
            ab = b - a
            pa = grid[..., None, :] - a
            denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-12)
            t = np.clip(np.sum(pa * ab, axis=-1) / denom, 0.0, 1.0)
            d = np.linalg.norm(pa - t[..., None] * ab, axis=-1).min(axis=-1)
            relief = np.sqrt(np.maximum(r * r - d * d, 0.0))
            tot = relief.sum()
            out.append([float((relief * grid[..., 0]).sum() / tot)
                        + self.origin[0] + i * self.pitch,
                        float((relief * grid[..., 1]).sum() / tot)
                        + self.origin[1]])
        return np.asarray(out)

    def as_dict(self) -> dict:
        return {"digits": list(self.digits),
                "origin_mm": list(self.origin),
                "size_mm": list(self.size),
                "pitch_mm": self.pitch,
                "stroke_radius_mm": self.stroke_radius}

    @classmethod
    def from_dict(cls, d: dict) -> "DigitLayout":
        return cls(digits=tuple(int(x) for x in d["digits"]),
                   origin=(float(d["origin_mm"][0]), float(d["origin_mm"][1])),
                   size=(float(d["size_mm"][0]), float(d["size_mm"][1])),
                   pitch=float(d["pitch_mm"]),
                   stroke_radius=float(d["stroke_radius_mm"]))


def embossed_card_stack(inner_face_x: float, feed_y: float,
                        layout: DigitLayout | None = None, *,
                        n_cards: int = 5, thickness: float = 0.3,
                        stagger: float = 4.5, bottom_edge_z: float = 3.0,
                        half_length: float = 42.8,
                        card_width: float = 54.0) -> Union:
    """Fanned card stack with embossed digits on the innermost face.

    The stack is built in card coordinates (feed axis centred on the card)
    and translated to feed_y, so tying the feed to the roll angle models a
    card carried by the rolling contact without slip.  Digit strokes are
    capsules whose axes lie on the innermost face, protruding one radius.
    """
    layout = DigitLayout() if layout is None else layout
    cards = []
    for j in range(n_cards):
        face = inner_face_x + j * thickness
        edge = bottom_edge_z + j * stagger
        center = np.array([face + 0.5 * thickness, 0.0,
                           edge - 0.5 * card_width])
        cards.append(Box(pose=Pose(np.eye(3), center),
                         half_extents=(0.5 * thickness, half_length,
                                       0.5 * card_width)))
    strokes = CapsuleSet(segments=layout.stroke_segments(inner_face_x),
                         radius=layout.stroke_radius)
    return Union(pose=Pose(np.eye(3), np.array([0.0, feed_y, 0.0])),
                 shapes=tuple(cards) + (strokes,))


# ---------------------------------------------------------------------------
# Scene and rig
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    """One rendered instant: object, roller angle, shear, marker layout."""
    shape: Shape | None = None
    roller_angle: float = 0.0
    shear: np.ndarray | None = None       # (n_u, n_v, 2) px displacement
    marker_pitch_mm: float = 4.0
    marker_radius_mm: float = 0.55
    marker_darkness: float = 0.15
    encoder_seed: int = 1234
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.marker_pitch_mm <= 2.0 * self.marker_radius_mm:
            raise ValueError("marker pitch must exceed twice the radius")


@dataclass(frozen=True)
class SensorRig:
    """Static render context: geometry, camera, lights, pixel-surface map."""
    geom: RollerGeometry
    cam: CameraModel
    lights: LightingModel
    pmap: PixelSurfaceMap
    compliance_factor: float = 0.5
    encoder_band_px: int = 8
    encoder_bit_px: float = 2.0

    @property
    def grid_spacing_mm(self) -> float:
        return 1.0 / self.pmap.px_per_mm

    @property
    def encoder_bits(self) -> int:
        dv = abs(self.pmap.grid_v[1] - self.pmap.grid_v[0])
        return int(round(TWO_PI / (self.encoder_bit_px * dv)))


def rig_from_config(cfg: Config, cam: CameraModel | None = None,
                    pmap: PixelSurfaceMap | None = None) -> SensorRig:
    geom = geometry_from_config(cfg)
    cam = camera_from_config(cfg) if cam is None else cam
    pmap = surface_map_from_config(cfg, cam=cam, geom=geom) if pmap is None \
        else pmap
    return SensorRig(
        geom=geom, cam=cam, lights=lighting_from_config(cfg), pmap=pmap,
        compliance_factor=cfg.get_float("synth", "compliance_factor"),
        encoder_band_px=cfg.get_int("encoder", "band_px"),
        encoder_bit_px=cfg.get_float("encoder", "bit_px"))


def scene_from_config(cfg: Config, **overrides) -> SceneSpec:
    base = dict(
        marker_pitch_mm=cfg.get_float("markers", "pitch_mm"),
        marker_radius_mm=cfg.get_float("markers", "radius_mm"),
        marker_darkness=cfg.get_float("markers", "darkness"),
        encoder_seed=cfg.get_int("encoder", "pattern_seed"),
        noise_sigma=cfg.get_float("synth", "noise_sigma"))
    base.update(overrides)
    return SceneSpec(**base)


@dataclass(frozen=True)
class TactileFrame:
    image: np.ndarray          # (h, w, 3) uint8 raw camera view
    roller_angle: float
    index: int = 0


@dataclass(frozen=True)
class FrameTruth:
    """Exact per-frame annotations for perception tests."""
    depth: np.ndarray                 # (n_u, n_v) smoothed indentation, mm
    penetration: np.ndarray           # raw, mm
    contact_mask: np.ndarray
    centroid_px: tuple[float, float] | None   # (row, col) on the grid
    centroid_coord: SurfaceCoord | None
    shear: np.ndarray                 # (n_u, n_v, 2) px
    marker_ids: np.ndarray            # (M, 2) lattice indices
    markers_ref: np.ndarray           # (M, 2) px (row, col), unsheared
    markers_cur: np.ndarray           # (M, 2) px, shear applied


# ---------------------------------------------------------------------------
# Encoder strip
# ---------------------------------------------------------------------------

def encoder_pattern(seed: int, n_bits: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2, n_bits).astype(bool)


def encoder_bit_indices(v: np.ndarray, roller_angle: float,
                        n_bits: int) -> np.ndarray:
    """Pattern index for sensed circumferential angles at a roll angle.

    The roll angle is wrapped before the sum so that angles differing by
    exactly one revolution index bit-identically.
    """
    phase = np.asarray(v, dtype=float) + wrap_angle(roller_angle)
    idx = np.floor(phase / TWO_PI * n_bits).astype(int)
    return np.mod(idx, n_bits)


# ---------------------------------------------------------------------------
# Markers
# ---------------------------------------------------------------------------

def marker_lattice(geom: RollerGeometry, pitch_mm: float, u_window: float):
    """Painted marker centers (u, v) covering the band around the window.

    The circumferential count is snapped so the ring closes exactly.
    """
    n_ring = int(round(TWO_PI * geom.max_radius / pitch_mm))
    dv = TWO_PI / n_ring
    du = pitch_mm / geom.generator_radius
    n_rows = int(math.floor(u_window / du))
    rows = np.arange(-n_rows, n_rows + 1)
    ring = np.arange(n_ring)
    ids = np.stack(np.meshgrid(rows, ring, indexing="ij"), axis=-1).reshape(-1, 2)
    u = ids[:, 0] * du
    v = wrap_angle_vec(ids[:, 1] * dv)
    return ids, np.column_stack([u, v])


def wrap_angle_vec(a: np.ndarray) -> np.ndarray:
    return np.remainder(np.asarray(a, dtype=float) + math.pi, TWO_PI) - math.pi


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _grid_points(rig: SensorRig):
    uu, vv = np.meshgrid(rig.pmap.grid_u, rig.pmap.grid_v, indexing="ij")
    rho = rig.geom.parallel_radius(uu)
    pts = np.stack([rho * np.cos(vv), -rho * np.sin(vv),
                    rig.geom.generator_radius * np.sin(uu)], axis=-1)
    cu = np.cos(uu)
    normals = np.stack([cu * np.cos(vv), -cu * np.sin(vv), np.sin(uu)], axis=-1)
    return pts, normals


def penetration_map(shape: Shape, rig: SensorRig, step: float = 0.05) -> np.ndarray:
    """Indentation along the inward normal for every rectified cell (mm)."""
    pts, normals = _grid_points(rig)
    flat_p = pts.reshape(-1, 3)
    flat_n = normals.reshape(-1, 3)
    depth = np.zeros(len(flat_p))
    touch = shape.sdf(flat_p) < 0.0
    if touch.any():
        p = flat_p[touch]
        n = flat_n[touch]
        limit = rig.geom.elastomer_thickness
        t_grid = np.arange(step, limit + 3 * step, step)
        lo = np.zeros(len(p))
        hi = np.full(len(p), np.nan)
        found = np.zeros(len(p), dtype=bool)
        for t in t_grid:
            out = shape.sdf(p - t * n) >= 0.0
            new = out & ~found
            hi[new] = t
            lo[~found & ~out] = t
            found |= new
            if found.all():
                break
        if not found.all():
            raise SceneError("indentation exceeds the elastomer thickness")
        for _ in range(25):
            mid = 0.5 * (lo + hi)
            inside = shape.sdf(p - mid[:, None] * n) < 0.0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        d = 0.5 * (lo + hi)
        if d.max() > limit:
            raise SceneError(
                f"indentation {d.max():.2f} mm exceeds the elastomer "
                f"thickness {limit:.2f} mm")
        depth[touch] = d
    return depth.reshape(pts.shape[:2])


def smooth_penetration(raw: np.ndarray, rig: SensorRig) -> np.ndarray:
    sigma_px = rig.geom.elastomer_thickness * rig.compliance_factor \
        * rig.pmap.px_per_mm
    return gaussian_filter(raw, sigma_px, mode="constant")


def shading_normals(depth: np.ndarray, rig: SensorRig) -> np.ndarray:
    """Unit tangent-frame normals of the indented surface, forward differences."""
    h = -depth
    dh_da = np.diff(h, axis=0, append=h[-1:, :])
    dh_db = np.diff(h, axis=1, append=h[:, -1:])
    delta = rig.grid_spacing_mm
    hx = -dh_da / delta   # d(height)/d(+u direction); rows run toward -u
    hy = dh_db / delta
    n = np.stack([-hx, -hy, np.ones_like(hx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _stamp_markers(img: np.ndarray, centers_px: np.ndarray, radius_px: float,
                   darkness: float) -> None:
    n_u, n_v = img.shape[:2]
    r_int = int(math.ceil(radius_px + 1.5))
    for row, col in centers_px:
        r0 = max(0, int(math.floor(row)) - r_int)
        r1 = min(n_u, int(math.ceil(row)) + r_int + 1)
        c0 = max(0, int(math.floor(col)) - r_int)
        c1 = min(n_v, int(math.ceil(col)) + r_int + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        rr, cc = np.mgrid[r0:r1, c0:c1]
        dist = np.hypot(rr - row, cc - col)
        cover = np.clip(radius_px + 0.5 - dist, 0.0, 1.0)
        factor = 1.0 - cover * (1.0 - darkness)
        img[r0:r1, c0:c1] *= factor[..., None]


def render_frame(scene: SceneSpec, rig: SensorRig,
                 index: int = 0) -> tuple[TactileFrame, FrameTruth]:
    """Render one tactile frame plus its exact annotations."""
    n_u, n_v = rig.pmap.grid_shape
    u_window = float(rig.pmap.grid_u[0])
    v_window = float(rig.pmap.grid_v[-1])
    du = abs(rig.pmap.grid_u[1] - rig.pmap.grid_u[0])
    dv = abs(rig.pmap.grid_v[1] - rig.pmap.grid_v[0])

    if scene.shape is not None:
        raw = penetration_map(scene.shape, rig)
        depth = smooth_penetration(raw, rig)
    else:
        raw = np.zeros((n_u, n_v))
        depth = raw
    normals = shading_normals(depth, rig)
    img = rig.lights.shade(normals)

    # Markers painted on the rotor appear at sensed v = painted v - angle.
    ids, painted = marker_lattice(rig.geom, scene.marker_pitch_mm, u_window)
    sensed_v = wrap_angle_vec(painted[:, 1] - scene.roller_angle)
    rows = (u_window - painted[:, 0]) / du
    cols = (sensed_v + v_window) / dv
    margin = scene.marker_radius_mm * rig.pmap.px_per_mm + 1.0
    band = rig.encoder_band_px
    visible = (rows > band + margin) & (rows < n_u - 1 - margin) \
        & (cols > margin) & (cols < n_v - 1 - margin)
    ref_px = np.column_stack([rows, cols])[visible]
    vis_ids = ids[visible]
    shear = scene.shear if scene.shear is not None else np.zeros((n_u, n_v, 2))
    disp = np.stack([
        map_coordinates(shear[..., 0], ref_px.T, order=1, mode="nearest"),
        map_coordinates(shear[..., 1], ref_px.T, order=1, mode="nearest"),
    ], axis=-1)
    cur_px = ref_px + disp
    _stamp_markers(img, cur_px, scene.marker_radius_mm * rig.pmap.px_per_mm,
                   scene.marker_darkness)

    # Encoder strip across the top band.
    pattern = encoder_pattern(scene.encoder_seed, rig.encoder_bits)
    bits = pattern[encoder_bit_indices(rig.pmap.grid_v, scene.roller_angle,
                                       rig.encoder_bits)]
    img[:band, :, :] = np.where(bits[None, :, None], 0.85, 0.08)

    # Warp the rectified rendering into the raw camera view.
    gi = (u_window - rig.pmap.surface_u) / du
    gj = (rig.pmap.surface_v + v_window) / dv
    # Replicate the window edge for in-patch pixels just outside the grid
    # so the unwarp never blends housing darkness into edge columns.
    raw_img = cv2.remap(img.astype(np.float32), gj.astype(np.float32),
                        gi.astype(np.float32), cv2.INTER_LINEAR,
                        borderMode=cv2.BORDER_REPLICATE)
    raw_img[~rig.pmap.valid] = BACKGROUND
    if scene.noise_sigma > 0:
        rng = np.random.default_rng(scene.noise_seed)
        raw_img = raw_img + rng.normal(
            scale=scene.noise_sigma, size=raw_img.shape).astype(np.float32)
    image = np.clip(np.rint(raw_img * 255.0), 0, 255).astype(np.uint8)

    mask = depth > 0.02
    if mask.any():
        w = depth * mask
        total = w.sum()
        rr, cc = np.mgrid[0:n_u, 0:n_v]
        crow = float((rr * w).sum() / total)
        ccol = float((cc * w).sum() / total)
        centroid_px = (crow, ccol)
        centroid_coord = SurfaceCoord(u_window - crow * du,
                                      -v_window + ccol * dv)
    else:
        centroid_px = None
        centroid_coord = None
    truth = FrameTruth(depth=depth, penetration=raw, contact_mask=mask,
                       centroid_px=centroid_px, centroid_coord=centroid_coord,
                       shear=shear, marker_ids=vis_ids, markers_ref=ref_px,
                       markers_cur=cur_px)
    return TactileFrame(image=image, roller_angle=scene.roller_angle,
                        index=index), truth


def render_reference_spin(rig: SensorRig, n_frames: int,
                          scene_template: SceneSpec | None = None):
    """Contact-free frames at uniform roller angles over one revolution."""
    if n_frames < 36:
        raise ValueError("reference spin needs at least 36 frames")
    template = scene_template if scene_template is not None else SceneSpec()
    out = []
    for k in range(n_frames):
        angle = TWO_PI * k / n_frames
        scene = replace(template, shape=None, shear=None, roller_angle=angle,
                        noise_sigma=0.0)
        frame, _ = render_frame(scene, rig, index=k)
        out.append((angle, frame))
    return out


# ---------------------------------------------------------------------------
# Task corpora
# ---------------------------------------------------------------------------

TASKS = ("card-pass", "cup-scan", "pen-rotate")


@dataclass(frozen=True)
class Corpus:
    task: str
    seed: int
    frames: tuple[TactileFrame, ...]
    truths: tuple[FrameTruth, ...]
    extras: tuple[dict, ...]          # per-frame scalar annotations
    manifest: dict


def _gaussian_shear(n_u, n_v, center, mag, sigma_px):
    rr, cc = np.mgrid[0:n_u, 0:n_v]
    g = np.exp(-((rr - center[0]) ** 2 + (cc - center[1]) ** 2)
               / (2 * sigma_px ** 2))
    shear = np.zeros((n_u, n_v, 2))
    shear[..., 0] = mag[0] * g
    shear[..., 1] = mag[1] * g
    return shear


def make_task_corpus(task: str, seed: int, rig: SensorRig,
                     n_frames: int = 24,
                     scene_template: SceneSpec | None = None) -> Corpus:
    """Deterministic frame sequence plus ground truth for a named task."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    template = scene_template if scene_template is not None else SceneSpec()
    rng = np.random.default_rng(seed)
    n_u, n_v = rig.pmap.grid_shape
    frames, truths, extras = [], [], []
    surface_radius = rig.geom.max_radius
    # Card frames roll off a full card length, so they step a smaller angle.
    angle_step = 0.18 if task == "card-pass" else 0.35
    card_layout = DigitLayout()
    feed_origin = -0.5 * surface_radius * angle_step * (n_frames - 1)

    for k in range(n_frames):
        angle = angle_step * k + float(rng.uniform(0, 0.02))
        extra = {"frame": k, "roller_angle": angle}
        if task == "card-pass":
            # An embossed card stack carried through the grasp by the
            # rolling contact: no slip ties the feed to the roll angle at
            # the equator radius.
            feed = feed_origin + surface_radius * angle
            stack = embossed_card_stack(surface_radius - 0.8, feed,
                                        card_layout)
            shear = _gaussian_shear(
                n_u, n_v, (n_u / 2, n_v / 2),
                (0.3, 1.8 + float(rng.uniform(-0.2, 0.2))), 40.0)
            scene = replace(template, shape=stack, roller_angle=angle,
                            shear=shear, noise_seed=seed * 1000 + k)
            extra["card_feed_mm"] = feed
        elif task == "cup-scan":
            # Embossed shell; each pass tilts the cup a further 5 deg.
            pass_id = k // 8
            tilt = math.radians(5.0) * pass_id
            centers = np.array(
                [[math.pi + 0.12 * i - 0.42, 6.0 * ((i * 7) % 5 - 2)]
                 for i in range(8)])
            cup = EmbossedCylinder(
                pose=Pose(Rotation_x(tilt),
                          np.array([surface_radius + 34.4, 0.0, 0.0])),
                radius=35.0, half_length=60.0, bump_centers=centers,
                bump_radius=2.2, bump_height=0.9)
            scene = replace(template, shape=cup, roller_angle=angle,
                            shear=None, noise_seed=seed * 1000 + k)
            extra["pass_id"] = pass_id
            extra["tilt_rad"] = tilt
        else:  # pen-rotate
            spin = math.radians(30.0) + 0.12 * k
            pen = Cylinder(pose=Pose(Rotation_x(spin),
                                     np.array([surface_radius + 3.95, 0.0,
                                               0.0])),
                           radius=4.5, half_length=70.0)
            shear = _gaussian_shear(n_u, n_v, (n_u / 2, n_v / 2),
                                    (0.0, 1.5), 50.0)
            scene = replace(template, shape=pen, roller_angle=angle,
                            shear=shear, noise_seed=seed * 1000 + k)
            extra["pen_axis_rad"] = spin
        frame, truth = render_frame(scene, rig, index=k)
        frames.append(frame)
        truths.append(truth)
        extras.append(extra)

    manifest = {
        "task": task,
        "seed": seed,
        "n_frames": n_frames,
        "generator_radius_mm": rig.geom.generator_radius,
        "axis_offset_mm": rig.geom.axis_offset,
        "resolution": list(rig.cam.resolution),
        "encoder_bits": rig.encoder_bits,
        "lights_ambient": rig.lights.ambient,
    }
    if task == "card-pass":
        manifest["card"] = {**card_layout.as_dict(),
                            "feed_origin_mm": feed_origin,
                            "feed_radius_mm": surface_radius}
    return Corpus(task=task, seed=seed, frames=tuple(frames),
                  truths=tuple(truths), extras=tuple(extras),
                  manifest=manifest)


def Rotation_x(a: float) -> np.ndarray:
    """Rotation about the window's contact normal, steering in-plane angle."""
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


# ---------------------------------------------------------------------------
# Corpus disk format
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, out_dir) -> None:
    """Lossless 8-bit frames, per-frame sidecars, and one manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for frame, truth, extra in zip(corpus.frames, corpus.truths, corpus.extras):
        stem = f"{frame.index:06d}"
        cv2.imwrite(str(out / f"{stem}.png"),
                    cv2.cvtColor(frame.image, cv2.COLOR_RGB2BGR))
        sidecar = {
            "index": frame.index,
            "roller_angle": frame.roller_angle,
            "truth_file": f"{stem}_truth.npz",
            **extra,
        }
        with open(out / f"{stem}.json", "w") as fh:
            json.dump(sidecar, fh, indent=1, sort_keys=True)
        np.savez_compressed(
            out / f"{stem}_truth.npz",
            depth=truth.depth.astype(np.float32),
            contact_mask=truth.contact_mask,
            shear=truth.shear.astype(np.float32),
            marker_ids=truth.marker_ids,
            markers_ref=truth.markers_ref.astype(np.float32),
            markers_cur=truth.markers_cur.astype(np.float32),
            centroid_px=np.asarray(truth.centroid_px
                                   if truth.centroid_px else [np.nan, np.nan]))
    with open(out / "manifest.json", "w") as fh:
        json.dump(corpus.manifest, fh, indent=1, sort_keys=True)


def load_corpus_frames(in_dir):
    """Frames and sidecars back from disk, sorted by index."""
    root = Path(in_dir)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    frames, sidecars = [], []
    for meta_path in sorted(root.glob("[0-9]" * 6 + ".json")):
        with open(meta_path) as fh:
            meta = json.load(fh)
        bgr = cv2.imread(str(meta_path.with_suffix(".png")), cv2.IMREAD_COLOR)
        frames.append(TactileFrame(
            image=cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB),
            roller_angle=float(meta["roller_angle"]),
            index=int(meta["index"])))
        sidecars.append(meta)
    return frames, sidecars, manifest
