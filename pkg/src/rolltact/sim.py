"""Quasi-static grasp simulator for two steerable rollers and a wrist.

The world is velocity-level: each tick the commanded joint rates define the
roller surface velocities at the contacts, and the object moves with the
least-squares twist consistent with rolling without slipping at every held
contact (min-norm, so unconstrained motion components stay zero).  There is
no inertia; when nothing is commanded nothing moves.

Frames and conventions
----------------------
The grasp centre starts at the world origin with finger A at +Y, finger B at
-Y; the wrist degree of freedom rotates the whole hand about a vertical axis
offset along +X.  The roller surface is the surface of revolution whose
generator circle (radius ``generator_radius``) is offset ``axis_offset``
from the spin axis, which makes the point-to-surface distance analytic: in
meridian coordinates it is the distance to the generator circle.

Sensed contact locations use the camera-view axes of the control module:
``v_s`` is positive in the direction surface material moves for positive
roller velocity, ``u_s`` is positive toward the +axis end of the roller.
Pixel scales follow the rectified-image sampling density.

Objects are rigid; a support surface restricts the object to planar motion.
The cable and card-stack scenarios use reduced models (a scalar nip tension
with a sagging node chain, and a sliding stack with a friction-release shear
transient) rather than rigid-body contact.
"""

import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .config import Config
from .control import (ControlObservation, ControlParams, FingerObservation,
                      RollerCommand, TaskController, TaskSpec,
                      control_from_config)
from .geometry import (HandParams, RollerGeometry, geometry_from_config,
                       hand_from_config)

FINGERS = ("A", "B")
SCENARIOS = ("prism", "pen", "planar-profile", "sphere", "cable",
             "card-stack", "cup")
CONDITIONS = ("regrasp-open", "regrasp-closed", "roll-open", "roll-closed")


class IntegrationError(RuntimeError):
    """A step produced interpenetration beyond tolerance; reduce dt."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimParams:
    """Stepping, contact, disturbance and reduced-model constants."""
    dt: float = 1.0 / 30.0
    friction_mu: float = 0.8
    contact_weight: float = 1.0
    grip_force_n: float = 20.0
    slip_drag: float = 0.2
    slip_mm_per_n_s: float = 0.05
    kiss_tol: float = 0.05
    max_penetration: float = 0.3
    pivot_rate: float = 3.0
    sensor_delay: int = 2
    shear_px_per_n: float = 2.0
    speed_asymmetry: float = 0.18
    regrasp_bias: float = 1.5
    regrasp_noise: float = 0.6
    regrasp_squirt: float = 1.2
    wrist_axis_offset: float = 6.0
    roll_rate: float = 1.2
    wrist_step: float = 0.3
    wrist_rate: float = 0.6
    experiment_max_s: float = 240.0
    held_revolutions: float = 5.0
    u_window: float = 0.28
    v_window: float = 0.825
    px_per_mm: float = 6.0
    cable_feed: float = 0.6
    cable_tension_px_per_mm: float = 0.4
    cable_drift_away: float = 0.05
    cable_drift_toward: float = 0.6
    cable_slack_px: float = 1.5
    cable_nodes: int = 10
    cable_span: float = 200.0
    card_snap_px: float = 5.0
    card_shear_multi: float = 0.02
    card_shear_single: float = 0.12
    card_length: float = 60.0
    card_count: int = 3

    @property
    def slip_capacity(self) -> float:
        """Largest no-slip constraint residual a contact can carry, mm/s."""
        return self.friction_mu * self.grip_force_n * self.slip_mm_per_n_s


def sim_from_config(cfg: Config) -> SimParams:
    f = cfg.get_float
    return SimParams(
        dt=f("sim", "dt_s"),
        friction_mu=f("sim", "friction_mu"),
        contact_weight=f("sim", "contact_weight"),
        grip_force_n=f("sim", "grip_force_n"),
        slip_drag=f("sim", "slip_drag"),
        slip_mm_per_n_s=f("sim", "slip_mm_per_n_s"),
        kiss_tol=f("sim", "kiss_tol_mm"),
        max_penetration=f("sim", "max_penetration_mm"),
        pivot_rate=f("sim", "pivot_rate_rad_s"),
        sensor_delay=cfg.get_int("sim", "sensor_delay_frames"),
        shear_px_per_n=f("sim", "shear_px_per_n"),
        speed_asymmetry=f("sim", "speed_asymmetry"),
        regrasp_bias=f("sim", "regrasp_bias_mm"),
        regrasp_noise=f("sim", "regrasp_noise_mm"),
        regrasp_squirt=f("sim", "regrasp_squirt_gain"),
        wrist_axis_offset=f("sim", "wrist_axis_offset_mm"),
        roll_rate=f("sim", "roll_rate_rad_s"),
        wrist_step=f("sim", "wrist_step_rad"),
        wrist_rate=f("sim", "wrist_rate_rad_s"),
        experiment_max_s=f("sim", "experiment_max_s"),
        held_revolutions=f("sim", "held_revolutions"),
        u_window=f("sensing", "u_window_rad"),
        v_window=f("sensing", "v_window_rad"),
        px_per_mm=f("sensing", "unwarp_px_per_mm"),
        cable_feed=f("control", "cable_feed_rad_s"),
        cable_tension_px_per_mm=f("sim", "cable_tension_px_per_mm"),
        cable_drift_away=f("sim", "cable_drift_away_px_s"),
        cable_drift_toward=f("sim", "cable_drift_toward_px_s"),
        cable_slack_px=f("sim", "cable_slack_px"),
        cable_nodes=cfg.get_int("sim", "cable_nodes"),
        cable_span=f("sim", "cable_span_mm"),
        card_snap_px=f("sim", "card_snap_px"),
        card_shear_multi=f("sim", "card_shear_multi_px_per_mm"),
        card_shear_single=f("sim", "card_shear_single_px_per_mm"),
        card_length=f("sim", "card_length_mm"),
        card_count=cfg.get_int("sim", "card_count"),
    )


# ---------------------------------------------------------------------------
# Object shapes (signed distance in the object frame)
# ---------------------------------------------------------------------------

def _fd_normal(shape, p: np.ndarray) -> np.ndarray:
    h = 1e-4
    g = np.array([
        shape.signed_distance(p + [h, 0, 0]) - shape.signed_distance(p - [h, 0, 0]),
        shape.signed_distance(p + [0, h, 0]) - shape.signed_distance(p - [0, h, 0]),
        shape.signed_distance(p + [0, 0, h]) - shape.signed_distance(p - [0, 0, h]),
    ])
    n = np.linalg.norm(g)
    return g / n if n > 0.0 else np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class SphereShape:
    radius: float

    def signed_distance(self, p: np.ndarray) -> float:
        return float(np.linalg.norm(p)) - self.radius

    def normal(self, p: np.ndarray) -> np.ndarray:
        n = np.linalg.norm(p)
        return p / n if n > 0.0 else np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class CylinderShape:
    """Capped circular cylinder; ``axis`` selects the object-frame axis."""
    radius: float
    half_length: float
    axis: str = "z"

    def _split(self, p: np.ndarray) -> tuple[float, float]:
        if self.axis == "z":
            return math.hypot(p[0], p[1]), p[2]
        return math.hypot(p[1], p[2]), p[0]

    def signed_distance(self, p: np.ndarray) -> float:
        radial, axial = self._split(np.asarray(p, dtype=float))
        dr = radial - self.radius
        da = abs(axial) - self.half_length
        outside = math.hypot(max(dr, 0.0), max(da, 0.0))
        return outside + min(max(dr, da), 0.0)

    def normal(self, p: np.ndarray) -> np.ndarray:
        return _fd_normal(self, np.asarray(p, dtype=float))


@dataclass(frozen=True)
class RoundedBoxShape:
    half_extents: tuple
    rounding: float = 1.0

    def signed_distance(self, p: np.ndarray) -> float:
        q = np.abs(np.asarray(p, dtype=float)) - np.asarray(self.half_extents)
        q += self.rounding
        outside = float(np.linalg.norm(np.maximum(q, 0.0)))
        return outside + min(float(np.max(q)), 0.0) - self.rounding

    def normal(self, p: np.ndarray) -> np.ndarray:
        return _fd_normal(self, np.asarray(p, dtype=float))


# ---------------------------------------------------------------------------
# World state
# ---------------------------------------------------------------------------

@dataclass
class FingerState:
    """One finger's joints plus its radial placement of the roller."""
    sign: float
    pivot: float = 0.0
    roll: float = 0.0
    rate: float = 0.0
    reach: float = 25.0          # grasp centre to window surface point, mm
    closed: bool = True
    force_frac: float = 0.3
    asym: float = 1.0            # effective roller speed factor (disturbance)


@dataclass
class ContactRecord:
    """A held contact: geometry plus the sensed window location.

    ``psi`` is the signed angle, about the contact normal, from the
    object's reference tangent direction (its +Z axis projected into the
    tangent plane) to the roller's rolling direction.  ``force_n`` is the
    normal-force proxy, the commanded grip fraction of the hand's maximum.
    """
    finger: str
    point: np.ndarray            # world, on the object surface
    object_point: np.ndarray     # object frame (warm start for re-detection)
    normal: np.ndarray           # world, outward from the object
    v_s_rad: float
    u_s_rad: float
    v_s_px: float
    u_s_px: float
    gap: float
    psi: float = 0.0
    force_n: float = 0.0
    slipping: bool = False


@dataclass
class ObjectState:
    shape: object
    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    on_support: bool = False


@dataclass
class CableState:
    """Scalar nip tension plus a sagging node chain toward the anchor.

    The tension integrates the mismatch between the actual material flux and
    the task's travel demand; traveling toward the anchor adds a slackening
    drift that feedback must cancel.  Tension is clamped at zero; hitting
    zero while pushing toward the anchor marks buckling.
    """
    tension: float = 6.0
    direction: int = 1           # +1 away from the anchor (anchor at -X)
    fed: float = 0.0
    slack: bool = False
    buckled: bool = False
    nodes: np.ndarray = None


@dataclass
class CardStackState:
    """Cards sliding out one by one under a driven roller.

    Shear on the driving finger ramps gently while several cards share
    friction; when one card remains the release of card-on-card friction
    snaps the stored shear, which is the single-card transient.
    """
    held: int = 3
    slide: float = 0.0
    shear: float = 0.0
    single_card_t: float = -1.0


@dataclass
class SimWorld:
    geom: RollerGeometry
    hand: HandParams
    params: SimParams
    scenario: str
    fingers: dict
    obj: ObjectState = None
    cable: CableState = None
    cards: CardStackState = None
    wrist: float = 0.0
    t: float = 0.0
    contacts: dict = field(default_factory=dict)
    external_force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    last_twist: np.ndarray = field(default_factory=lambda: np.zeros(6))
    last_residual: float = 0.0
    yaw_unwrapped: float = 0.0
    grasp_lost: bool = False
    rng: np.random.Generator = None
    config_digest: str = ""


def _rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _hand_frame(world: SimWorld) -> tuple[np.ndarray, np.ndarray]:
    """(rotation, grasp-centre position) of the hand after wrist rotation."""
    axis_pt = np.array([world.params.wrist_axis_offset, 0.0, 0.0])
    rot = _rz(world.wrist)
    return rot, axis_pt + rot @ (-axis_pt)


def _finger_frame(world: SimWorld, name: str):
    """(centre, x_hat, y_hat, z_hat) of a finger's roller in world frame.

    x_hat points from the roller centre toward the grasp centre, y_hat is
    the rolling direction set by the pivot, z_hat the roller spin axis.
    """
    st = world.fingers[name]
    rho = world.geom.max_radius
    rot, centre = _hand_frame(world)
    c = centre + rot @ np.array([0.0, st.sign * (st.reach + rho), 0.0])
    xhat = rot @ np.array([0.0, -st.sign, 0.0])
    yhat = rot @ np.array([math.sin(st.pivot), 0.0, math.cos(st.pivot)])
    zhat = np.cross(xhat, yhat)
    return c, xhat, yhat, zhat


# ---------------------------------------------------------------------------
# Roller surface distance field
# ---------------------------------------------------------------------------

def _roller_distance(q, centre, zhat, geom) -> tuple[float, np.ndarray]:
    """Signed distance from a point to the roller surface, with gradient.

    In meridian coordinates (radius about the spin axis, height along it)
    the surface is the generator circle of radius ``generator_radius``
    centred ``axis_offset`` inside the axis, so the distance is radial in
    that plane and the gradient has unit norm.
    """
    w = np.asarray(q, dtype=float) - centre
    z = float(w @ zhat)
    radial_vec = w - z * zhat
    r = float(np.linalg.norm(radial_vec))
    if r < 1e-12:
        radial_hat = np.zeros(3)
    else:
        radial_hat = radial_vec / r
    h = math.hypot(r + geom.axis_offset, z)
    grad = ((r + geom.axis_offset) / h) * radial_hat + (z / h) * zhat
    return h - geom.generator_radius, grad


def _project_object(obj, x, iters=3):
    """Nearest object-surface point to ``x`` (world frame)."""
    for _ in range(iters):
        local = obj.rot.T @ (x - obj.pos)
        sd = obj.shape.signed_distance(local)
        x = x - sd * (obj.rot @ obj.shape.normal(local))
    return x


def _vertical_cylinder_contact(obj, c, zhat):
    """Analytic contact for a vertical object cylinder and a vertical roller.

    With both axes vertical the nearest pair lies in the roller's equator
    plane, where the roller section is a circle of the equator radius, so
    the problem reduces to two circles; returns None when the geometry does
    not qualify.
    """
    shape = obj.shape
    if not (isinstance(shape, CylinderShape) and shape.axis == "z"):
        return None
    if abs(zhat[2]) < 1.0 - 1e-9 or abs(obj.rot[2, 2]) < 1.0 - 1e-9:
        return None
    if abs(c[2] - obj.pos[2]) > shape.half_length:
        return None
    span = np.array([c[0] - obj.pos[0], c[1] - obj.pos[1], 0.0])
    dist = np.linalg.norm(span)
    if dist < 1e-9:
        return None
    u = span / dist
    return np.array([obj.pos[0], obj.pos[1], c[2]]) + shape.radius * u


def _descend_to_contact(world, name, warm=None):
    """Object-surface point nearest the roller surface (world frame).

    Analytic for spheres and for vertical cylinders against a vertical
    roller axis (the grasped-upright scenarios); other shapes localize by
    sliding along the object surface against the roller distance gradient,
    then polish with a Newton step in the local tangent plane.
    """
    obj = world.obj
    geom = world.geom
    c, xhat, _, zhat = _finger_frame(world, name)
    if isinstance(obj.shape, SphereShape):
        _, grad = _roller_distance(obj.pos, c, zhat, geom)
        return obj.pos - obj.shape.radius * grad
    x = _vertical_cylinder_contact(obj, c, zhat)
    if x is not None:
        return x
    if warm is None:
        warm = c + geom.max_radius * xhat
    x = _project_object(obj, np.asarray(warm, dtype=float))
    for _ in range(200):
        local = obj.rot.T @ (x - obj.pos)
        n = obj.rot @ obj.shape.normal(local)
        _, grad = _roller_distance(x, c, zhat, geom)
        tangent = grad - (grad @ n) * n
        size = float(np.linalg.norm(tangent))
        if size < 5e-3:
            break
        x = _project_object(obj, x - min(2.0, 4.0 * size) * tangent / size)
    for _ in range(25):
        local = obj.rot.T @ (x - obj.pos)
        n = obj.rot @ obj.shape.normal(local)
        axis = np.zeros(3)
        axis[int(np.argmin(np.abs(n)))] = 1.0
        t1 = np.cross(n, axis)
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)

        def f(a, b):
            probe = _project_object(obj, x + a * t1 + b * t2)
            return _roller_distance(probe, c, zhat, geom)[0]

        e = 1e-4
        f00 = f(0.0, 0.0)
        fp0, fm0 = f(e, 0.0), f(-e, 0.0)
        f0p, f0m = f(0.0, e), f(0.0, -e)
        fpp, fpm = f(e, e), f(e, -e)
        fmp, fmm = f(-e, e), f(-e, -e)
        g = np.array([fp0 - fm0, f0p - f0m]) / (2.0 * e)
        hess = np.array([
            [(fp0 - 2.0 * f00 + fm0) / e ** 2,
             (fpp - fpm - fmp + fmm) / (4.0 * e ** 2)],
            [(fpp - fpm - fmp + fmm) / (4.0 * e ** 2),
             (f0p - 2.0 * f00 + f0m) / e ** 2]])
        try:
            delta = np.linalg.solve(hess, -g)
        except np.linalg.LinAlgError:
            delta = -g / max(abs(hess[0, 0]), abs(hess[1, 1]), 1e-6)
        if float(g @ delta) > 0.0:
            delta = -g / max(abs(hess[0, 0]), abs(hess[1, 1]), 1e-6)
        norm = float(np.linalg.norm(delta))
        if norm > 1.0:
            delta *= 1.0 / norm
        x = _project_object(obj, x + delta[0] * t1 + delta[1] * t2)
        if norm < 2e-9:
            break
    return x


def _contact_record(world, name, x) -> ContactRecord:
    c, xhat, yhat, zhat = _finger_frame(world, name)
    gap, _ = _roller_distance(x, c, zhat, world.geom)
    w = x - c
    p_local = np.array([w @ xhat, w @ yhat, w @ zhat])
    v_s_rad = math.atan2(-p_local[1], p_local[0])
    u_arg = max(-1.0, min(1.0, p_local[2] / world.geom.generator_radius))
    u_s_rad = math.asin(u_arg)
    px = world.params.px_per_mm
    local = world.obj.rot.T @ (x - world.obj.pos)
    normal = world.obj.rot @ world.obj.shape.normal(local)
    ref = world.obj.rot[:, 2]
    ref = ref - (ref @ normal) * normal
    if np.linalg.norm(ref) < 1e-6:
        ref = world.obj.rot[:, 0]
        ref = ref - (ref @ normal) * normal
    roll_dir = yhat - (yhat @ normal) * normal
    psi = math.atan2(float(np.cross(ref, roll_dir) @ normal),
                     float(ref @ roll_dir))
    force = world.fingers[name].force_frac * world.hand.max_normal_force
    return ContactRecord(
        finger=name, point=x, object_point=local, normal=normal,
        v_s_rad=v_s_rad, u_s_rad=u_s_rad,
        v_s_px=-v_s_rad * px * world.geom.max_radius,
        u_s_px=u_s_rad * px * world.geom.generator_radius,
        gap=gap, psi=psi, force_n=force)


def _refresh_contacts(world: SimWorld) -> None:
    """Re-detect contacts and keep closed fingers kissing the object.

    The finger reach is adjusted so the contact gap vanishes (the grip is a
    position servo holding a set force, so it tracks the surface).  A
    contact whose sensed location leaves the sensing window is lost.
    """
    p = world.params
    for name, st in world.fingers.items():
        if world.obj is None or not st.closed:
            world.contacts.pop(name, None)
            continue
        warm = None
        prev = world.contacts.get(name)
        if prev is not None:
            warm = world.obj.rot @ prev.object_point + world.obj.pos
        x = _descend_to_contact(world, name, warm)
        rec = _contact_record(world, name, x)
        if rec.gap < -p.max_penetration:
            raise IntegrationError(
                f"finger {name} interpenetrates {-rec.gap:.3f} mm; "
                "dt too large for the commanded rates")
        for _ in range(6):
            st.reach -= rec.gap
            x = _descend_to_contact(world, name, x)
            rec = _contact_record(world, name, x)
            if abs(rec.gap) <= 1e-9:
                break
        if abs(rec.v_s_rad) > p.v_window or abs(rec.u_s_rad) > p.u_window:
            world.contacts.pop(name, None)
            world.grasp_lost = True
            continue
        world.contacts[name] = rec


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------

def _is_noop(world, commands, wrist_rate) -> bool:
    if world.cable is not None or world.cards is not None:
        return False
    if wrist_rate != 0.0 or np.any(world.external_force != 0.0):
        return False
    for name, st in world.fingers.items():
        cmd = commands[name]
        if cmd.roller_rate != 0.0 or cmd.pivot != st.pivot:
            return False
        if (cmd.grip_force_frac > 0.0) != st.closed:
            return False
    return True


def _contact_rows(world, name, wrist_rate):
    """No-slip rows (object twist coefficients) and surface-velocity rhs."""
    st = world.fingers[name]
    rec = world.contacts[name]
    c, _, _, zhat = _finger_frame(world, name)
    axis_pt = np.array([world.params.wrist_axis_offset, 0.0, 0.0])
    omega_hand = np.array([0.0, 0.0, wrist_rate])
    surface_vel = (st.rate * st.asym) * np.cross(zhat, rec.point - c)
    surface_vel = surface_vel + np.cross(omega_hand, rec.point - axis_pt)
    lever = rec.point - world.obj.pos
    rows = np.zeros((3, 6))
    for axis in range(3):
        rows[axis, axis] = 1.0
        rows[axis, 3:] = np.cross(lever, np.eye(3)[axis])
    return rows, surface_vel


def _solve_twist(world, wrist_rate):
    """Object twist from the held contacts.

    Each contact splits into a normal part and two tangential rows.  The
    tangential rows are the no-slip conditions, reconciled by weighted
    least squares with the minimum-norm solution so unconstrained motion
    components stay zero.  The normal parts express the force-servoed
    grip: each finger's reach tracks its own gap, so the common gap mode
    is free, but equal squeeze forces keep the object from sliding toward
    either roller, which makes the *difference* of the two gap rates a
    hard constraint (a single contact keeps its full normal row).  A
    contact whose tangential residual exceeds the friction capacity is
    declared slipping and re-weighted to a drag fraction.  Support-resting
    objects move in the planar subspace (v_x, v_y, w_z).
    """
    p = world.params
    names = [n for n in FINGERS if n in world.contacts]
    if not names:
        return np.zeros(6), 0.0
    if world.obj.on_support:
        basis = np.eye(6)[:, [0, 1, 5]]
    else:
        basis = np.eye(6)
    blocks = {n: _contact_rows(world, n, wrist_rate) for n in names}
    norm_parts, tang = {}, {}
    for n in names:
        rows, rhs = blocks[n]
        normal = world.contacts[n].normal
        norm_parts[n] = (normal @ rows @ basis, float(normal @ rhs))
        proj = np.eye(3) - np.outer(normal, normal)
        tang[n] = (proj @ rows @ basis, proj @ rhs)
    if len(names) == 2:
        first, second = (norm_parts[n] for n in names)
        a_n = np.atleast_2d(first[0] - second[0])
        b_n = np.asarray([first[1] - second[1]])
    else:
        only = norm_parts[names[0]]
        a_n = np.atleast_2d(only[0])
        b_n = np.asarray([only[1]])
    x_p, *_ = np.linalg.lstsq(a_n, b_n, rcond=None)
    _, s, vt = np.linalg.svd(a_n)
    rank = int(np.sum(s > 1e-10 * max(s[0], 1.0)))
    null = vt[rank:].T
    weights = {n: p.contact_weight for n in names}
    twist = basis @ x_p
    for attempt in range(2):
        a_t = np.vstack([tang[n][0] * weights[n] for n in names])
        b_t = np.concatenate([tang[n][1] * weights[n] for n in names])
        if null.shape[1]:
            q, *_ = np.linalg.lstsq(a_t @ null, b_t - a_t @ x_p, rcond=None)
            sol = x_p + null @ q
        else:
            sol = x_p
        twist = basis @ sol
        slipped = False
        for n in names:
            residual = blocks[n][0] @ twist - blocks[n][1]
            normal = world.contacts[n].normal
            tangential = residual - (residual @ normal) * normal
            is_slip = bool(np.linalg.norm(tangential) > p.slip_capacity)
            world.contacts[n].slipping = is_slip
            if is_slip and weights[n] == p.contact_weight:
                weights[n] = p.contact_weight * p.slip_drag
                slipped = True
        if not slipped:
            break
    held = [n for n in names if not world.contacts[n].slipping]
    residuals = [float(np.linalg.norm(blocks[n][0] @ twist - blocks[n][1]))
                 for n in held]
    return twist, max(residuals, default=0.0)


def step(world: SimWorld, commands: dict, dt: float,
         wrist_rate: float = 0.0) -> SimWorld:
    """Advance the world by one control tick under per-finger commands.

    Joint targets are applied first (pivot slewing is rate limited, roller
    velocity is direct), then the object follows the least-squares no-slip
    twist, then contacts are re-detected and the grip re-kissed.  A fully
    idle command set leaves the world bit-identical.
    """
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"dt {dt} outside (0, 0.1] s")
    if _is_noop(world, commands, wrist_rate):
        world.t += dt
        return world
    p = world.params
    for name, st in world.fingers.items():
        cmd = commands[name]
        slew = max(-p.pivot_rate * dt,
                   min(p.pivot_rate * dt, cmd.pivot - st.pivot))
        st.pivot += slew
        st.rate = cmd.roller_rate
        st.roll += cmd.roller_rate * dt
        was_closed = st.closed
        st.closed = cmd.grip_force_frac > 0.0
        st.force_frac = cmd.grip_force_frac
        if was_closed and not st.closed:
            # Released rollers retract clear of the workspace; closing
            # again re-kisses from wide open.
            st.reach = world.hand.max_opening / 2.0
    world.wrist += wrist_rate * dt

    if world.cable is not None:
        _step_cable(world, commands, dt)
    elif world.cards is not None:
        _step_cards(world, commands, dt)
    elif world.obj is not None:
        if world.contacts:
            twist, residual = _solve_twist(world, wrist_rate)
        else:
            twist, residual = np.zeros(6), 0.0
        world.last_twist = twist
        world.last_residual = residual
        v, omega = twist[:3], twist[3:]
        angle = np.linalg.norm(omega) * dt
        if angle > 0.0:
            world.obj.rot = Rotation.from_rotvec(omega * dt).as_matrix() @ \
                world.obj.rot
        if np.any(v != 0.0):
            world.obj.pos = world.obj.pos + v * dt
        world.yaw_unwrapped += omega[2] * dt
    _refresh_contacts(world)
    world.t += dt
    return world


def _step_cable(world, commands, dt):
    p = world.params
    cable = world.cable
    rho = world.geom.max_radius
    rate_mean = float(np.mean([commands[n].roller_rate for n in FINGERS]))
    demand = cable.direction * p.cable_feed
    drift = p.cable_drift_away if cable.direction > 0 else p.cable_drift_toward
    flux = rate_mean * rho
    cable.fed += flux * dt
    rate_px = p.cable_tension_px_per_mm * rho * (rate_mean - demand) - drift
    cable.tension = max(0.0, cable.tension + rate_px * dt)
    cable.slack = cable.tension < p.cable_slack_px
    if cable.tension == 0.0 and cable.direction < 0:
        cable.buckled = True
    n = p.cable_nodes
    sag = 8.0 * max(0.0, 1.0 - cable.tension / 6.0)
    xs = np.linspace(-p.cable_span, 0.0, n)
    ys = -sag * np.sin(np.pi * np.arange(n) / (n - 1))
    cable.nodes = np.column_stack([xs, ys])


def _step_cards(world, commands, dt):
    p = world.params
    cards = world.cards
    rho = world.geom.max_radius
    speed = commands["A"].roller_rate * rho
    cards.slide += speed * dt
    out = min(int(cards.slide // p.card_length), p.card_count - 1)
    held = p.card_count - out
    slope = p.card_shear_single if held <= 1 else p.card_shear_multi
    cards.shear += slope * speed * dt
    if held <= 1 and cards.held > 1:
        cards.shear += p.card_snap_px
        cards.single_card_t = world.t + dt
    cards.held = held


# ---------------------------------------------------------------------------
# Observation adapter
# ---------------------------------------------------------------------------

def observe(world: SimWorld, spin_axis=(1.0, 0.0, 0.0)) -> ControlObservation:
    """Controller-facing snapshot of the world (undelayed).

    Contact points are reported in world coordinates, which coincide with
    the hand frame whenever the wrist is home; shear is the per-finger
    share of the external force expressed on the window axes.
    """
    p = world.params
    fingers = {}
    for name in FINGERS:
        rec = world.contacts.get(name)
        st = world.fingers[name]
        if world.cable is not None:
            fingers[name] = FingerObservation(
                in_contact=True, v_s=0.0, u_s=0.0, shear_v=0.0, shear_u=0.0,
                contact_point=None, pivot=st.pivot)
            continue
        if world.cards is not None:
            fingers[name] = FingerObservation(
                in_contact=name == "A", v_s=0.0, u_s=0.0,
                shear_v=world.cards.shear if name == "A" else 0.0,
                shear_u=0.0, contact_point=None, pivot=st.pivot)
            continue
        if rec is None:
            fingers[name] = FingerObservation(
                in_contact=False, contact_point=None, pivot=st.pivot)
            continue
        _, _, yhat, zhat = _finger_frame(world, name)
        share = world.external_force / 2.0
        fingers[name] = FingerObservation(
            in_contact=True, v_s=rec.v_s_px, u_s=rec.u_s_px,
            shear_v=float(share @ yhat) * p.shear_px_per_n,
            shear_u=float(share @ zhat) * p.shear_px_per_n,
            contact_point=rec.point, pivot=st.pivot)
    spin = float(world.last_twist[3:] @ np.asarray(spin_axis, dtype=float))
    return ControlObservation(
        fingers=fingers, spin_estimate=spin, yaw=world.yaw_unwrapped,
        height=float(world.obj.pos[2]) if world.obj is not None else 0.0,
        wrist_angle=world.wrist,
        tension_px=world.cable.tension if world.cable is not None else 0.0)


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

def make_scenario(name: str, cfg: Config | None = None,
                  seed: int = 0) -> SimWorld:
    """Canonical initial world with the named object grasped or staged."""
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    cfg = cfg or Config.default()
    geom = geometry_from_config(cfg)
    hand = hand_from_config(cfg)
    params = sim_from_config(cfg)
    world = SimWorld(
        geom=geom, hand=hand, params=params, scenario=name,
        fingers={"A": FingerState(sign=1.0), "B": FingerState(sign=-1.0)},
        rng=np.random.default_rng(seed), config_digest=cfg.digest())
    if name == "prism":
        # The prism's rounded vertical faces present an effectively
        # cylindrical surface to the rollers, so contact is modeled with
        # the face cylinder; yaw still tracks the prism's rotation.
        world.obj = ObjectState(
            shape=CylinderShape(radius=25.0, half_length=40.0),
            on_support=True)
        for st in world.fingers.values():
            st.pivot = -st.sign * math.pi / 2.0
            st.reach = 25.0
    elif name == "cup":
        world.obj = ObjectState(
            shape=CylinderShape(radius=35.0, half_length=50.0),
            on_support=True)
        for st in world.fingers.values():
            st.pivot = -st.sign * math.pi / 2.0
            st.reach = 35.0
    elif name == "pen":
        world.obj = ObjectState(
            shape=CylinderShape(radius=5.0, half_length=70.0, axis="x"))
        for st in world.fingers.values():
            st.reach = 5.0
    elif name == "sphere":
        world.obj = ObjectState(shape=SphereShape(radius=30.0))
        for st in world.fingers.values():
            st.reach = 30.0
    elif name == "planar-profile":
        world.obj = ObjectState(
            shape=RoundedBoxShape(half_extents=(40.0, 3.0, 30.0)),
            pos=np.array([-10.0, 0.0, 0.0]))
        for st in world.fingers.values():
            st.reach = 3.0
    elif name == "cable":
        world.cable = CableState(direction=1)
        for st in world.fingers.values():
            st.pivot = math.pi / 2.0
    elif name == "card-stack":
        world.cards = CardStackState(held=params.card_count)
    if world.obj is not None:
        _refresh_contacts(world)
    return world


# ---------------------------------------------------------------------------
# Task and experiment runners
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskRunResult:
    outcome: str
    events: tuple
    world: SimWorld


def run_task(world: SimWorld, controller: TaskController, duration_s: float,
             spin_axis=(1.0, 0.0, 0.0)) -> TaskRunResult:
    """Step a task controller against the world with sensor delay."""
    p = world.params
    buffer = deque([observe(world, spin_axis)] * (p.sensor_delay + 1),
                   maxlen=p.sensor_delay + 1)
    events, outcome = [], ""
    for _ in range(int(round(duration_s / p.dt))):
        result = controller.step(buffer[0], world.t, p.dt)
        events.extend(result.events)
        step(world, result.commands, p.dt, wrist_rate=result.wrist_rate)
        buffer.append(observe(world, spin_axis))
        if result.done:
            outcome = result.outcome
            break
    return TaskRunResult(outcome=outcome, events=tuple(events), world=world)


@dataclass(frozen=True)
class ExperimentResult:
    """One seeded run of a rolling-versus-regrasping condition."""
    condition: str
    seed: int
    revolutions: float
    held: bool
    max_vs_frac: float
    lines: tuple

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines) + "\n")


def run_experiment(condition: str, seed: int, cfg: Config | None = None,
                   out=None) -> ExperimentResult:
    """Execute one experimental condition and emit its trace.

    The trace has a provenance header and one row per control tick with
    the sensed contact locations, the accumulated object yaw, and the
    grasp-held flag.  Regrasp conditions add a seeded placement offset at
    every re-grip; all conditions share a seeded roller speed asymmetry.
    """
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    cfg = cfg or Config.default()
    p = sim_from_config(cfg)
    world = make_scenario("prism", cfg, seed=seed)
    world.fingers["A"].asym = 1.0 - p.speed_asymmetry * world.rng.uniform(0.6, 1.0)
    spec = TaskSpec(variant="roll-vs-regrasp", condition=condition,
                    target_spin=p.roll_rate, wrist_step=p.wrist_step,
                    wrist_rate=p.wrist_rate)
    controller = TaskController(spec, control_from_config(cfg),
                                world.geom, world.hand)
    half_width_px = p.v_window * world.geom.max_radius * p.px_per_mm
    lines = [f"# condition={condition} seed={seed} "
             f"config={world.config_digest[:12]}"]
    buffer = deque([observe(world)] * (p.sensor_delay + 1),
                   maxlen=p.sensor_delay + 1)
    vs = {"A": 0.0, "B": 0.0}
    was_closed = True
    max_vs = 0.0
    while world.t < p.experiment_max_s:
        result = controller.step(buffer[0], world.t, p.dt)
        closed = result.commands["A"].grip_force_frac > 0.0
        if closed and not was_closed:
            # Re-grip placement error, plus the pinch settle: convex rollers
            # closing on an off-centre cylinder squeeze it further off
            # centre before friction holds, so the tangential offset is
            # amplified at every uncorrected re-grip.
            rot, centre = _hand_frame(world)
            x_hand = rot @ np.array([1.0, 0.0, 0.0])
            along = float((world.obj.pos - centre) @ x_hand)
            kick = p.regrasp_bias + p.regrasp_noise * world.rng.standard_normal()
            shift = (p.regrasp_squirt - 1.0) * along + kick
            world.obj.pos = world.obj.pos + shift * x_hand
        was_closed = closed
        step(world, result.commands, p.dt, wrist_rate=result.wrist_rate)
        for name in FINGERS:
            rec = world.contacts.get(name)
            if rec is not None:
                vs[name] = rec.v_s_px
                max_vs = max(max_vs, abs(rec.v_s_px))
        held = not world.grasp_lost
        lines.append(f"{world.t:.3f} {vs['A']:.3f} {vs['B']:.3f} "
                     f"{world.yaw_unwrapped:.4f} {int(held)}")
        if world.grasp_lost:
            break
        if abs(world.yaw_unwrapped) >= 2.0 * math.pi * p.held_revolutions:
            break
        buffer.append(observe(world))
    result = ExperimentResult(
        condition=condition, seed=seed,
        revolutions=abs(world.yaw_unwrapped) / (2.0 * math.pi),
        held=not world.grasp_lost,
        max_vs_frac=max_vs / half_width_px,
        lines=tuple(lines))
    if out is not None:
        result.write(out)
    return result
