"""Tactile-servoed roller control: velocity mapping, servo laws, task logic.

The hand holds an object between two steerable rollers (fingers "A" and "B").
Low-level commands are per-finger: a roller velocity, a pivot angle target,
and a grip target.  The object-velocity map converts a desired object twist
into those commands through the rolling-contact kinematics; small servo laws
correct the contact location and react to shear on top of it.

Servo coordinate convention
---------------------------
Controllers consume the contact location in the camera-view axes: positive
``v_s`` is the direction material flows for positive roller velocity, which
is the *negation* of the rectified-image column axis (the fold mirror flips
the view).  Under that convention the proportional law
``omega = gain * (v_des - v_s)`` is negative feedback.  ``servo_location``
adapts a perception ContactState; the simulator produces the convention
directly.
"""

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .config import Config
from .geometry import (HandParams, RollerGeometry, fundamental_forms,
                       hand_from_config)

MODES = ("grasping", "reactive", "active")
VARIANTS = ("cylinder-rotate", "planar-reorient", "screw-trajectory",
            "cable-trace", "card-pick", "roll-vs-regrasp")
CONDITIONS = ("regrasp-open", "regrasp-closed", "roll-open", "roll-closed")
FINGERS = ("A", "B")


class InfeasibleTwistError(ValueError):
    """Requested object twist has a component no roller motion can produce."""


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlParams:
    """Gains, deadbands and limits of all controllers (units px, rad, s)."""
    servo_gain: float = 0.05
    servo_max: float = 2.0
    reactive_gain: float = 0.05
    reactive_deadband: float = 2.0
    spin_gain: float = 0.8
    trajectory_gain: float = 2.0
    pivot_center_gain: float = 0.002
    cable_feed: float = 0.6
    cable_tension_gain: float = 0.08
    cable_pivot_gain: float = 0.004
    card_drive: float = 0.8
    card_quiet_frames: int = 10
    card_quiet_tol: float = 0.3
    card_slope_jump: float = 1.5
    card_timeout_s: float = 20.0
    grip_dwell_s: float = 0.3
    release_dwell_s: float = 0.2
    idle_pivot_policy: str = "hold"
    pivot_range: float = math.pi / 2.0
    grip_opening: float = 50.0
    grip_force_frac: float = 0.3

    def __post_init__(self):
        gains = (self.servo_gain, self.reactive_gain, self.spin_gain,
                 self.trajectory_gain, self.pivot_center_gain,
                 self.cable_tension_gain, self.cable_pivot_gain)
        if min(gains) < 0.0:
            raise ValueError("gains must be nonnegative")
        if self.idle_pivot_policy not in ("hold", "center"):
            raise ValueError("idle_pivot_policy must be 'hold' or 'center'")


@dataclass(frozen=True)
class RollerCommand:
    """One finger's joint targets for a control tick."""
    mode: str = "grasping"
    roller_rate: float = 0.0
    pivot: float = 0.0
    grip_opening: float = 50.0
    grip_force_frac: float = 0.3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if abs(self.pivot) > math.pi / 2.0 + 1e-12:
            raise ValueError(f"pivot target {self.pivot:.4f} outside +-pi/2")
        if self.mode == "grasping" and self.roller_rate != 0.0:
            raise ValueError("grasping mode requires zero roller velocity")
        if not (0.0 <= self.grip_force_frac <= 1.0):
            raise ValueError("grip force fraction outside [0, 1]")
        if not all(map(math.isfinite,
                       (self.roller_rate, self.pivot, self.grip_opening))):
            raise ValueError("command fields must be finite")


@dataclass(frozen=True)
class TaskSpec:
    """High-level task selector plus its variant-specific targets."""
    variant: str
    target_spin: float = 0.0            # rad/s, rotation and roll variants
    waypoints: tuple = ()               # (yaw rad, height mm) pairs, screw
    pitch: float = 0.0                  # mm/rad along the screw axis
    direction: int = 1                  # cable travel: +1 away from anchor
    tension_px: float = 6.0             # cable shear setpoint
    condition: str = "roll-closed"      # roll-vs-regrasp experiment arm
    wrist_step: float = 0.3             # rad per regrasp cycle
    wrist_rate: float = 0.6             # rad/s during the wrist phases

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown task variant {self.variant!r}")
        if self.variant == "roll-vs-regrasp" and self.condition not in CONDITIONS:
            raise ValueError(f"unknown experiment condition {self.condition!r}")
        if self.direction not in (-1, 1):
            raise ValueError("cable direction must be +-1")
        flat = [x for wp in self.waypoints for x in wp]
        if not all(map(math.isfinite, flat + [self.target_spin, self.pitch,
                                              self.wrist_step, self.wrist_rate])):
            raise ValueError("task targets must be finite")


@dataclass(frozen=True)
class FingerObservation:
    """Sensed contact summary of one finger, camera-view axes, px."""
    in_contact: bool = False
    v_s: float = 0.0
    u_s: float = 0.0
    shear_v: float = 0.0               # rolling-direction shear component
    shear_u: float = 0.0
    contact_point: np.ndarray = None   # (3,) frame O, mm
    pivot: float = 0.0


@dataclass(frozen=True)
class ControlObservation:
    """Everything a task controller may consume in one tick."""
    fingers: dict
    spin_estimate: float = 0.0
    yaw: float = 0.0
    height: float = 0.0
    wrist_angle: float = 0.0
    tension_px: float = 0.0


@dataclass(frozen=True)
class ControlEvent:
    """Timestamped controller event for the run log."""
    t: float
    kind: str
    detail: str = ""

    def record(self) -> str:
        return f"{self.t:.3f} {self.kind} {self.detail}".rstrip()


@dataclass(frozen=True)
class VelocityMapResult:
    """Per-finger pivot and roller velocity realizing a twist."""
    pivot: dict
    rate: dict
    saturated: tuple = ()


# ---------------------------------------------------------------------------
# Object velocity mapping
# ---------------------------------------------------------------------------

def fold_to_pivot_range(pivot: float, rate: float) -> tuple[float, float]:
    """Wrap a pivot target into (-pi/2, pi/2], flipping the rolling sense.

    Pivots pi apart put the roller on the same line of action, so a target
    just past the range edge is realized from the opposite edge with the
    roller velocity negated; the contact velocity is unchanged.
    """
    if pivot > math.pi / 2.0:
        return pivot - math.pi, -rate
    if pivot <= -math.pi / 2.0:
        return pivot + math.pi, -rate
    return pivot, rate


def _fold_direction(vx: float, vz: float) -> tuple[float, float]:
    """Pivot in (-pi/2, pi/2] and speed sign for an X-Z target direction."""
    return fold_to_pivot_range(math.atan2(vx, vz), math.hypot(vx, vz))


def _contact_metric(point: np.ndarray, geom: RollerGeometry) -> float:
    """Circumferential metric (mm/rad) at a contact's height on the roller."""
    z = float(point[2])
    u = math.asin(max(-1.0, min(1.0, z / geom.generator_radius)))
    return fundamental_forms(u, geom).metric[1, 1]


def map_object_velocity(twist: np.ndarray, contacts: dict,
                        current_pivots: dict, geom: RollerGeometry,
                        params: ControlParams) -> VelocityMapResult:
    """Per-finger (pivot, roller velocity) realizing an object twist.

    ``twist`` is (vx, vy, vz, wx, wy, wz) of the object in frame O (mm/s,
    rad/s); ``contacts`` maps finger name to its contact point in frame O,
    with the roller centre vertically above (contact heights measured from
    the grasp plane).  Each contact must move at ``v + w x r``; the pivot
    aims the rolling direction at that velocity's X-Z projection and the
    roller speed follows from the circumferential metric at the contact.
    Any demanded velocity along the grip axis (Y) cannot come from rolling
    and raises ``InfeasibleTwistError`` naming the finger.
    """
    twist = np.asarray(twist, dtype=float).reshape(6)
    v, w = twist[:3], twist[3:]
    scale = max(1.0, float(np.max(np.abs(twist))))
    pivots, rates, saturated = {}, {}, []
    for name, point in contacts.items():
        point = np.asarray(point, dtype=float)
        target = v + np.cross(w, point)
        if abs(target[1]) > 1e-9 * scale:
            raise InfeasibleTwistError(
                f"finger {name} would need {target[1]:.3g} mm/s along the "
                "grip axis; rolling only spans the X-Z plane")
        pivot, speed = _fold_direction(target[0], target[2])
        if speed == 0.0:
            pivot = (0.0 if params.idle_pivot_policy == "center"
                     else float(current_pivots.get(name, 0.0)))
        rate = speed / _contact_metric(point, geom)
        if abs(rate) > params.servo_max:
            rate = math.copysign(params.servo_max, rate)
            saturated.append(name)
        pivots[name] = pivot
        rates[name] = rate
    return VelocityMapResult(pivot=pivots, rate=rates,
                             saturated=tuple(saturated))


def twist_from_finger_commands(result: VelocityMapResult, contacts: dict,
                               geom: RollerGeometry) -> np.ndarray:
    """Forward evaluation: the in-span twist produced by mapped commands.

    Stacks the per-contact velocity relations ``v + w x r = rate * metric *
    rolling_direction`` and solves by least squares; feasible components
    come back exactly and grip-axis components (the contact null space)
    come back zero.
    """
    rows, rhs = [], []
    for name, point in contacts.items():
        point = np.asarray(point, dtype=float)
        p = result.pivot[name]
        vel = result.rate[name] * _contact_metric(point, geom) * np.array(
            [math.sin(p), 0.0, math.cos(p)])
        for axis in range(3):
            row = np.zeros(6)
            row[axis] = 1.0
            lever = np.cross(np.eye(3)[axis], point)
            row[3:] = -lever
            rows.append(row)
            rhs.append(vel[axis])
    sol, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(rhs), rcond=None)
    return sol


# ---------------------------------------------------------------------------
# Servo laws
# ---------------------------------------------------------------------------

def reactive_roller(shear_v: float, params: ControlParams,
                    in_contact: bool = True) -> float:
    """Roller velocity yielding to shear: zero in the deadband, then linear.

    Emulates backdrivability on the non-backdrivable roller drive: the
    roller gives way in the direction the elastomer is being dragged.
    """
    if not in_contact:
        return 0.0
    excess = abs(shear_v) - params.reactive_deadband
    if excess <= 0.0:
        return 0.0
    rate = math.copysign(params.reactive_gain * excess, shear_v)
    return max(-params.servo_max, min(params.servo_max, rate))


def contact_location_servo(v_s: float, v_s_des: float, params: ControlParams,
                           in_contact: bool = True) -> tuple[float, bool]:
    """Proportional contact-centering law; flags when there is no contact."""
    if not in_contact:
        return 0.0, True
    rate = params.servo_gain * (v_s_des - v_s)
    return max(-params.servo_max, min(params.servo_max, rate)), False


def servo_location(state) -> tuple[float, float]:
    """(v_s, u_s) in servo axes from a perception ContactState.

    The rectified image's axes are mirrored relative to the camera view, so
    both centred offsets are negated.
    """
    centered = state.centered_px
    if centered is None:
        return 0.0, 0.0
    return -float(centered[1]), -float(centered[0])


# ---------------------------------------------------------------------------
# Task controllers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepResult:
    commands: dict
    wrist_rate: float = 0.0
    events: tuple = ()
    done: bool = False
    outcome: str = ""


class CardTransientDetector:
    """Shear-slope change detector for the single-card event.

    Fires when the latest slope of the shear magnitude jumps away from the
    recent median slope by more than the threshold, and only after a full
    window of mutually consistent slopes.  A constant-slope ramp never
    fires regardless of magnitude.
    """

    def __init__(self, params: ControlParams):
        self._slopes = deque(maxlen=params.card_quiet_frames)
        self._last = None
        self._params = params

    def update(self, shear_mag: float) -> bool:
        if self._last is None:
            self._last = shear_mag
            return False
        slope = shear_mag - self._last
        self._last = shear_mag
        p = self._params
        if len(self._slopes) == self._slopes.maxlen:
            base = float(np.median(self._slopes))
            spread = float(np.max(np.abs(np.asarray(self._slopes) - base)))
            if spread <= p.card_quiet_tol and abs(slope - base) > p.card_slope_jump:
                return True
        self._slopes.append(slope)
        return False


class TaskController:
    """Deterministic per-tick state machine for one task variant.

    Consumes immutable observations and emits per-finger commands plus a
    wrist rate; all transient state (detector windows, waypoint index,
    regrasp phase) lives on the instance.
    """

    def __init__(self, spec: TaskSpec, params: ControlParams,
                 geom: RollerGeometry, hand: HandParams):
        self.spec = spec
        self.params = params
        self.geom = geom
        self.hand = hand
        self._card = CardTransientDetector(params)
        self._card_started = None
        self._wp_index = 0
        self._phase = "grip"
        self._phase_t = 0.0
        self._lost = False
        self._slack_flagged = False

    # -- helpers ----------------------------------------------------------

    def _grip(self, closed: bool = True) -> dict:
        p = self.params
        frac = p.grip_force_frac if closed else 0.0
        opening = p.grip_opening if closed else p.grip_opening + 40.0
        return {"grip_opening": opening, "grip_force_frac": frac}

    def _freeze(self, obs: ControlObservation, t: float) -> StepResult:
        """Lost-contact fallback: stop rollers, keep grip, log once."""
        events = ()
        if not self._lost:
            self._lost = True
            events = (ControlEvent(t, "lost-contact",
                                   f"task={self.spec.variant}"),)
        cmds = {n: RollerCommand(mode="grasping", roller_rate=0.0,
                                 pivot=obs.fingers[n].pivot, **self._grip())
                for n in FINGERS}
        return StepResult(commands=cmds, events=events)

    def _active(self, rate: float, pivot: float,
                closed: bool = True) -> RollerCommand:
        p = self.params
        rate = max(-p.servo_max, min(p.servo_max, rate))
        pivot = max(-p.pivot_range, min(p.pivot_range, pivot))
        return RollerCommand(mode="active", roller_rate=rate, pivot=pivot,
                             **self._grip(closed))

    def _map_twist(self, obs: ControlObservation,
                   twist: np.ndarray) -> VelocityMapResult:
        contacts = {n: obs.fingers[n].contact_point for n in FINGERS
                    if obs.fingers[n].contact_point is not None}
        pivots = {n: obs.fingers[n].pivot for n in FINGERS}
        return map_object_velocity(twist, contacts, pivots, self.geom,
                                   self.params)

    # -- dispatch ---------------------------------------------------------

    def step(self, obs: ControlObservation, t: float, dt: float) -> StepResult:
        variant = self.spec.variant
        if variant != "roll-vs-regrasp":
            if variant == "card-pick":
                have = obs.fingers["A"].in_contact
            else:
                have = all(obs.fingers[n].in_contact for n in FINGERS)
            if not have:
                return self._freeze(obs, t)
        self._lost = False
        handler = {
            "cylinder-rotate": self._step_rotate,
            "planar-reorient": self._step_rotate,
            "screw-trajectory": self._step_screw,
            "cable-trace": self._step_cable,
            "card-pick": self._step_card,
            "roll-vs-regrasp": self._step_experiment,
        }[variant]
        return handler(obs, t, dt)

    # -- variants ---------------------------------------------------------

    def _step_rotate(self, obs, t, dt):
        """Constant-spin servo; the planar variant spins about the grip axis."""
        p = self.params
        about_y = self.spec.variant == "planar-reorient"
        axis = np.array([0.0, 1.0, 0.0] if about_y else [1.0, 0.0, 0.0])
        commanded = self.spec.target_spin + p.spin_gain * (
            self.spec.target_spin - obs.spin_estimate)
        twist = np.concatenate([np.zeros(3), commanded * axis])
        mapped = self._map_twist(obs, twist)
        events = tuple(ControlEvent(t, "saturation", f"finger={n}")
                       for n in mapped.saturated)
        cmds = {}
        for n in FINGERS:
            correction, _ = contact_location_servo(
                obs.fingers[n].v_s, 0.0, p, obs.fingers[n].in_contact)
            rate = mapped.rate[n] + correction
            pivot = mapped.pivot[n]
            if about_y and rate != 0.0:
                # Steer the rolling direction to recentre the contact along
                # the roller axis; the sign follows the rolling sense.
                pivot += p.pivot_center_gain * obs.fingers[n].u_s * \
                    math.copysign(1.0, rate)
            pivot, rate = fold_to_pivot_range(pivot, rate)
            cmds[n] = self._active(rate, pivot)
        return StepResult(commands=cmds, events=events)

    def _step_screw(self, obs, t, dt):
        """Waypoint tracking of coupled yaw and height along a screw."""
        p = self.params
        if self._wp_index >= len(self.spec.waypoints):
            cmds = {n: RollerCommand(pivot=obs.fingers[n].pivot,
                                     **self._grip()) for n in FINGERS}
            return StepResult(commands=cmds, done=True, outcome="complete")
        yaw_wp, _ = self.spec.waypoints[self._wp_index]
        err = yaw_wp - obs.yaw
        if abs(err) < 2e-3:
            self._wp_index += 1
        spin = max(-p.servo_max, min(p.servo_max, p.trajectory_gain * err))
        twist = np.array([0.0, 0.0, self.spec.pitch * spin, 0.0, 0.0, spin])
        mapped = self._map_twist(obs, twist)
        cmds = {n: self._active(mapped.rate[n], mapped.pivot[n])
                for n in FINGERS}
        return StepResult(commands=cmds)

    def _step_cable(self, obs, t, dt):
        """Feed along the cable; servo tension by shear and height by pivot."""
        p = self.params
        spec = self.spec
        feed = spec.direction * p.cable_feed
        correction = p.cable_tension_gain * (spec.tension_px - obs.tension_px)
        events = []
        if obs.tension_px < 0.25 * spec.tension_px and not self._slack_flagged:
            self._slack_flagged = True
            events.append(ControlEvent(t, "slack", "cable tension collapsed"))
        cmds = {}
        for n in FINGERS:
            tilt = p.cable_pivot_gain * obs.fingers[n].u_s * spec.direction
            pivot, rate = fold_to_pivot_range(math.pi / 2.0 + tilt,
                                              feed + correction)
            cmds[n] = self._active(rate, pivot)
        return StepResult(commands=cmds, events=tuple(events))

    def _step_card(self, obs, t, dt):
        """Drive one roller and wait for the single-card shear transient."""
        p = self.params
        if self._card_started is None:
            self._card_started = t
        mag = math.hypot(obs.fingers["A"].shear_v, obs.fingers["A"].shear_u)
        fired = self._card.update(mag)
        cmds = {
            "A": self._active(p.card_drive, obs.fingers["A"].pivot),
            "B": RollerCommand(pivot=obs.fingers["B"].pivot, **self._grip()),
        }
        if fired:
            return StepResult(commands=cmds, done=True, outcome="single-card",
                              events=(ControlEvent(t, "single-card",
                                                   "shear transient"),))
        if t - self._card_started > p.card_timeout_s:
            return StepResult(commands=cmds, done=True, outcome="inconclusive",
                              events=(ControlEvent(t, "inconclusive",
                                                   "card-pick timeout"),))
        return StepResult(commands=cmds)

    # -- experiment protocol ----------------------------------------------

    def _step_experiment(self, obs, t, dt):
        cond = self.spec.condition
        if cond.startswith("roll"):
            return self._step_roll(obs, cond.endswith("closed"))
        return self._step_regrasp(obs, t, cond.endswith("closed"))

    def _step_roll(self, obs, closed):
        """Continuous rolling about the vertical axis, optionally servoed."""
        p = self.params
        pivots = {"A": -math.pi / 2.0, "B": math.pi / 2.0}
        cmds = {}
        for n in FINGERS:
            rate = self.spec.target_spin
            if closed:
                corr, _ = contact_location_servo(
                    obs.fingers[n].v_s, 0.0, p, obs.fingers[n].in_contact)
                rate += corr
            cmds[n] = self._active(rate, pivots[n])
        return StepResult(commands=cmds)

    def _step_regrasp(self, obs, t, closed):
        """Grip / rotate-wrist / release / reset cycle, optionally servoed.

        During the wrist turn the closed-loop arm servoes each finger on its
        own contact error.  A lateral object offset shows up with opposite
        signs on the two fingertips, so the per-finger corrections add up to
        a pure recentering pull with no net spin command; all other phases
        keep the rollers still.
        """
        p = self.params
        spec = self.spec
        if self._phase == "grip" and t - self._phase_t >= p.grip_dwell_s:
            self._phase, self._phase_t = "rotate", t
        elif self._phase == "rotate" and obs.wrist_angle >= spec.wrist_step:
            self._phase, self._phase_t = "release", t
        elif self._phase == "release" and t - self._phase_t >= p.release_dwell_s:
            self._phase, self._phase_t = "reset", t
        elif self._phase == "reset" and obs.wrist_angle <= 0.0:
            self._phase, self._phase_t = "grip", t

        gripping = self._phase in ("grip", "rotate")
        wrist_rate = {"rotate": spec.wrist_rate,
                      "reset": -spec.wrist_rate}.get(self._phase, 0.0)
        servo = closed and self._phase == "rotate"
        pivots = {"A": -math.pi / 2.0, "B": math.pi / 2.0}
        cmds = {}
        for n in FINGERS:
            if servo and obs.fingers[n].in_contact:
                rate, _ = contact_location_servo(obs.fingers[n].v_s, 0.0, p)
                cmds[n] = self._active(rate, pivots[n], closed=gripping)
            else:
                cmds[n] = RollerCommand(pivot=pivots[n],
                                        **self._grip(gripping))
        return StepResult(commands=cmds, wrist_rate=wrist_rate)


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def control_from_config(cfg: Config) -> ControlParams:
    hand = hand_from_config(cfg)
    return ControlParams(
        servo_gain=cfg.get_float("control", "servo_gain"),
        servo_max=cfg.get_float("control", "servo_max_rad_s"),
        reactive_gain=cfg.get_float("control", "reactive_gain"),
        reactive_deadband=cfg.get_float("control", "reactive_deadband_px"),
        spin_gain=cfg.get_float("control", "spin_gain"),
        trajectory_gain=cfg.get_float("control", "trajectory_gain"),
        pivot_center_gain=cfg.get_float("control", "pivot_center_gain"),
        cable_feed=cfg.get_float("control", "cable_feed_rad_s"),
        cable_tension_gain=cfg.get_float("control", "cable_tension_gain"),
        cable_pivot_gain=cfg.get_float("control", "cable_pivot_gain"),
        card_drive=cfg.get_float("control", "card_drive_rad_s"),
        card_quiet_frames=cfg.get_int("control", "card_quiet_frames"),
        card_quiet_tol=cfg.get_float("control", "card_quiet_tol_px"),
        card_slope_jump=cfg.get_float("control", "card_slope_jump_px"),
        card_timeout_s=cfg.get_float("control", "card_timeout_s"),
        grip_dwell_s=cfg.get_float("control", "grip_dwell_s"),
        release_dwell_s=cfg.get_float("control", "release_dwell_s"),
        idle_pivot_policy=cfg.get_str("control", "idle_pivot_policy"),
        pivot_range=hand.pivot_range,
        grip_opening=cfg.get_float("control", "grip_opening_mm"),
        grip_force_frac=cfg.get_float("control", "grip_force_frac"),
    )
