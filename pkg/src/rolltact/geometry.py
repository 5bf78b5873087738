"""Roller surface geometry, rolling-contact kinematics, and hand FK.

Coordinate conventions
----------------------
Roller surface: surface of revolution about the z-axis of the rotor frame,
parameterized by (u, v) with u the longitudinal (meridian) angle and v the
circumferential angle:

    (u, v) -> ((R cos u - D) cos v, -(R cos u - D) sin v, R sin u)

where R is the generating-circle radius and D the axis offset.  The parallel
radius is rho(u) = R cos u - D; the surface degenerates where rho <= 0.

Contact frame: right-handed, origin at the contact point, z along the outward
surface normal, x along increasing u (longitudinal), y along increasing v
(latitudinal).

Hand frame O: origin at the hand base, grip axis along Y (fingers close along
+-Y), X forward, Z up.  Finger A sits at +Y, finger B at -Y, mirrored across
the X-Z plane.  The stator frame of each finger has x pointing at the grasp
centre, y along the rolling direction, and z along the roller's axis of
revolution; the rotor frame differs from the stator by the roller angle about
that axis.  At pivot zero the rolling direction is Z of frame O; the pivot
turns it within the X-Z plane, so direction (sin p, 0, cos p) at pivot p.
"""

import math
from dataclasses import dataclass

import numpy as np

from .config import Config

TWO_PI = 2.0 * math.pi


class DomainError(ValueError):
    """Surface coordinate outside the patch domain."""


class SingularityError(ValueError):
    """Fundamental forms requested where the parallel radius vanishes."""


class JointRangeError(ValueError):
    """Joint command outside its mechanical limit."""


def wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi] using the exact IEEE remainder."""
    return math.remainder(float(a), TWO_PI)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RollerGeometry:
    """Surface-of-revolution roller (all lengths mm, angles rad)."""
    generator_radius: float = 100.0
    axis_offset: float = 80.0
    u_min: float = -5.0 * math.pi / 12.0
    u_max: float = 5.0 * math.pi / 12.0
    elastomer_thickness: float = 3.0

    def __post_init__(self):
        if not (self.generator_radius > self.axis_offset >= 0.0):
            raise ValueError("require generator_radius > axis_offset >= 0")
        if not (self.u_min < self.u_max):
            raise ValueError("require u_min < u_max")
        half_pi = math.pi / 2.0
        if not (-half_pi < self.u_min and self.u_max < half_pi):
            raise ValueError("u domain must lie within (-pi/2, pi/2)")

    @property
    def max_radius(self) -> float:
        """Parallel radius at the equator (u = 0)."""
        return self.generator_radius - self.axis_offset

    def parallel_radius(self, u) -> np.ndarray | float:
        return self.generator_radius * np.cos(u) - self.axis_offset

    def contains_u(self, u: float) -> bool:
        return self.u_min <= u <= self.u_max


@dataclass(frozen=True)
class SurfaceCoord:
    """Point on the patch; v is canonicalized into [-pi, pi] on construction."""
    u: float
    v: float

    def __post_init__(self):
        object.__setattr__(self, "u", float(self.u))
        object.__setattr__(self, "v", wrap_angle(self.v))


@dataclass(frozen=True)
class FundamentalForms:
    """Curvature form, torsion form and metric of the patch at fixed u."""
    curvature: np.ndarray   # 2x2 diagonal, 1/mm
    torsion: np.ndarray     # 1x2, 1/mm
    metric: np.ndarray      # 2x2 diagonal, mm/rad


@dataclass(frozen=True)
class ContactKinematicState:
    """Inputs of the contact velocity map at one instant.

    ``coord_rate`` is the sensed rate of the contact coordinate on the
    stator; the roller's own spin enters as a first-slot offset
    ``[roller_rate, 0]`` subtracted from it.  ``frame_angle`` is the relative
    angle between the roller and object contact frames.
    """
    coord: SurfaceCoord
    frame_angle: float
    object_curvature: np.ndarray      # 2x2 symmetric, 1/mm
    coord_rate: np.ndarray            # (2,) rad/s
    roller_rate: float                # rad/s

    def __post_init__(self):
        k = np.asarray(self.object_curvature, dtype=float)
        if k.shape != (2, 2) or not np.allclose(k, k.T, atol=1e-9):
            raise ValueError("object curvature must be symmetric 2x2")
        object.__setattr__(self, "object_curvature", k)
        object.__setattr__(self, "coord_rate",
                           np.asarray(self.coord_rate, dtype=float).reshape(2))


@dataclass(frozen=True)
class HandParams:
    """Link lengths and actuation limits of the two-finger hand."""
    link0: float = 29.75
    link1: float = 35.25
    link2: float = 60.0
    link3: float = 87.25
    pivot_range: float = math.pi / 2.0
    max_opening: float = 160.0
    max_normal_force: float = 68.3
    gear_ratio: float = 331.0

    def __post_init__(self):
        if min(self.link0, self.link1, self.link2, self.link3) <= 0:
            raise ValueError("link lengths must be positive")
        if self.pivot_range > math.pi / 2.0 + 1e-12:
            raise ValueError("pivot range at most pi/2")


@dataclass(frozen=True)
class Pose:
    """Rigid transform: x_world = rotation @ x_local + translation."""
    rotation: np.ndarray
    translation: np.ndarray

    def transform(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class FingerFrames:
    """Stator (sensor) and rotor poses of one finger in frame O."""
    stator: Pose
    rotor: Pose
    roller_center: np.ndarray


# ---------------------------------------------------------------------------
# Surface map and differential forms
# ---------------------------------------------------------------------------

def surface_point(coord: SurfaceCoord, geom: RollerGeometry) -> np.ndarray:
    """Map a patch coordinate to 3D (rotor frame, mm)."""
    if not geom.contains_u(coord.u):
        raise DomainError(f"u={coord.u:.6f} outside [{geom.u_min:.6f}, {geom.u_max:.6f}]")
    rho = geom.generator_radius * math.cos(coord.u) - geom.axis_offset
    return np.array([
        rho * math.cos(coord.v),
        -rho * math.sin(coord.v),
        geom.generator_radius * math.sin(coord.u),
    ])


def surface_grid(u, v, geom: RollerGeometry) -> np.ndarray:
    """Vectorized surface map; returns (..., 3).  No domain check."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    rho = geom.parallel_radius(u)
    return np.stack([
        rho * np.cos(v),
        -rho * np.sin(v),
        geom.generator_radius * np.sin(u) * np.ones_like(v),
    ], axis=-1)


def surface_normal(u, v, geom: RollerGeometry) -> np.ndarray:
    """Outward unit normal, (..., 3).  Valid where the parallel radius > 0."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    cu = np.cos(u)
    return np.stack([
        cu * np.cos(v),
        -cu * np.sin(v),
        np.sin(u) * np.ones_like(v),
    ], axis=-1)


def surface_tangents(u, v, geom: RollerGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Unit tangents along increasing u and v (contact-frame x and y axes)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    su, cu = np.sin(u), np.cos(u)
    sv, cv = np.sin(v), np.cos(v)
    xdir = np.stack([-su * cv, su * sv, cu * np.ones_like(v)], axis=-1)
    ydir = np.stack([-sv, -cv, np.zeros_like(sv + cv)], axis=-1)
    return xdir, ydir


def fundamental_forms(u: float, geom: RollerGeometry) -> FundamentalForms:
    """Curvature, torsion and metric forms of the patch at longitude u."""
    if not geom.contains_u(u):
        raise DomainError(f"u={u:.6f} outside patch domain")
    r0 = geom.generator_radius
    rho = r0 * math.cos(u) - geom.axis_offset
    if rho <= 0.0:
        raise SingularityError(f"parallel radius {rho:.6f} <= 0 at u={u:.6f}")
    curvature = np.array([[1.0 / r0, 0.0],
                          [0.0, math.cos(u) / rho]])
    torsion = np.array([[0.0, math.sin(u) / (geom.axis_offset - r0 * math.cos(u))]])
    metric = np.array([[r0, 0.0],
                       [0.0, rho]])
    return FundamentalForms(curvature, torsion, metric)


def relative_frame_operator(angle: float) -> np.ndarray:
    """Orientation operator between the two contact frames.

    The object's contact frame is reached from the roller's by a rotation of
    ``angle`` about the (shared, opposed) normal plus the handedness flip of
    facing frames, which makes the operator an orthogonal involution.
    """
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [-s, -c]])


def contact_object_velocity(state: ContactKinematicState,
                            geom: RollerGeometry) -> tuple[float, float]:
    """Contact rotational velocity (omega_x, omega_y) in the roller contact frame.

    Rolling without slipping at a point contact with known object curvature:
    the stack [-omega_y, omega_x] equals (K + K_obj~) M (coord_rate - [w_r, 0])
    with K_obj~ the object curvature expressed in the roller contact frame.

    The returned pair is the angular velocity of the roller surface relative
    to the object; with the roller held still the object's own angular
    velocity is the negation.  Feeding the contact-coordinate rate painted on
    the rotor with roller_rate = 0 evaluates the bare no-slip map.
    """
    forms = fundamental_forms(state.coord.u, geom)
    r = relative_frame_operator(state.frame_angle)
    k_obj = r @ state.object_curvature @ r
    rel = state.coord_rate - np.array([state.roller_rate, 0.0])
    stacked = (forms.curvature + k_obj) @ forms.metric @ rel
    return float(stacked[1]), float(-stacked[0])


# ---------------------------------------------------------------------------
# Hand forward kinematics
# ---------------------------------------------------------------------------

def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def opening_from_base(base_angle: float, hand: HandParams) -> float:
    """Surface-to-surface opening for a symmetric base command.

    The four-bar base linkage is abstracted to a pure Y translation of the
    roller centre; the input link vertical (base_angle = 0) is fully closed.
    """
    return hand.max_opening * math.sin(base_angle)


def fk_contact_frames(joints: dict[str, tuple[float, float, float]],
                      hand: HandParams,
                      geom: RollerGeometry) -> dict[str, FingerFrames]:
    """Poses of the stator and rotor frames of both fingers in frame O.

    ``joints`` maps finger name ("A" at +Y, "B" at -Y) to
    (base_angle, pivot_angle, roller_angle).
    """
    out = {}
    for name, (base, pivot, roll) in joints.items():
        if name not in ("A", "B"):
            raise ValueError(f"unknown finger {name!r}")
        if not (0.0 <= base <= math.pi / 2.0 + 1e-12):
            raise JointRangeError(f"base angle {base:.4f} outside [0, pi/2]")
        if abs(pivot) > hand.pivot_range + 1e-12:
            raise JointRangeError(f"pivot angle {pivot:.4f} outside +-{hand.pivot_range:.4f}")
        sign = 1.0 if name == "A" else -1.0
        gap = opening_from_base(base, hand)
        center_y = sign * (geom.max_radius + 0.5 * gap)
        center = np.array([0.0, center_y, hand.link3])
        # Stator axes: x toward the grasp centre (contact direction), y along
        # the rolling direction, z along the axis of revolution.  The pivot
        # turns the rolling direction within the X-Z plane of frame O.
        x_axis = np.array([0.0, -sign, 0.0])
        y_axis = np.array([math.sin(pivot), 0.0, math.cos(pivot)])
        z_axis = np.cross(x_axis, y_axis)
        stator = Pose(np.column_stack([x_axis, y_axis, z_axis]), center)
        rotor = Pose(stator.rotation @ _rot_z(roll), center)
        out[name] = FingerFrames(stator=stator, rotor=rotor, roller_center=center)
    return out


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def geometry_from_config(cfg: Config) -> RollerGeometry:
    return RollerGeometry(
        generator_radius=cfg.get_float("roller", "generator_radius_mm"),
        axis_offset=cfg.get_float("roller", "axis_offset_mm"),
        u_min=cfg.get_float("roller", "u_min_rad"),
        u_max=cfg.get_float("roller", "u_max_rad"),
        elastomer_thickness=cfg.get_float("roller", "elastomer_thickness_mm"),
    )


def hand_from_config(cfg: Config) -> HandParams:
    return HandParams(
        link0=cfg.get_float("hand", "link0_mm"),
        link1=cfg.get_float("hand", "link1_mm"),
        link2=cfg.get_float("hand", "link2_mm"),
        link3=cfg.get_float("hand", "link3_mm"),
        pivot_range=cfg.get_float("hand", "pivot_range_rad"),
        max_opening=cfg.get_float("hand", "max_opening_mm"),
        max_normal_force=cfg.get_float("hand", "max_normal_force_n"),
        gear_ratio=cfg.get_float("hand", "gear_ratio"),
    )
