"""Surface map, fundamental forms, contact kinematics, and hand FK tests.

The fundamental forms are validated against finite-difference first and
second fundamental forms of the surface map, and the contact velocity map
against a brute-force rigid-body rolling integrator; neither oracle reuses
the closed-form expressions under test.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rolltact.geometry import (
    ContactKinematicState,
    DomainError,
    FingerFrames,
    HandParams,
    JointRangeError,
    Pose,
    RollerGeometry,
    SingularityError,
    SurfaceCoord,
    contact_object_velocity,
    fk_contact_frames,
    fundamental_forms,
    opening_from_base,
    relative_frame_operator,
    surface_grid,
    surface_normal,
    surface_point,
    surface_tangents,
)

GEOM = RollerGeometry()
SPHERE = RollerGeometry(generator_radius=100.0, axis_offset=0.0)
HAND = HandParams()

# Largest u with positive parallel radius for the stock roller: acos(0.8).
U_REGULAR = 0.64


# ---------------------------------------------------------------------------
# Surface map
# ---------------------------------------------------------------------------

def test_surface_point_equator():
    np.testing.assert_allclose(
        surface_point(SurfaceCoord(0.0, 0.0), GEOM), [20.0, 0.0, 0.0], atol=1e-12)


def test_surface_point_quarter_turn():
    np.testing.assert_allclose(
        surface_point(SurfaceCoord(0.0, math.pi / 2), GEOM),
        [0.0, -20.0, 0.0], atol=1e-12)


def test_surface_point_off_equator():
    # Frozen double-precision evaluation of the closed-form map.
    np.testing.assert_allclose(
        surface_point(SurfaceCoord(math.pi / 6, 0.0), GEOM),
        [6.6025403784438765, 0.0, 49.99999999999999], atol=1e-12)


def test_surface_point_domain_error():
    with pytest.raises(DomainError):
        surface_point(SurfaceCoord(1.4, 0.0), GEOM)


def test_surface_coord_wraps_v():
    assert SurfaceCoord(0.0, 3 * math.pi).v == pytest.approx(-math.pi, abs=1e-12)
    assert SurfaceCoord(0.0, 0.25).v == 0.25


@settings(max_examples=60, deadline=None)
@given(u=st.floats(-1.3, 1.3), v=st.floats(-math.pi, math.pi))
def test_surface_point_periodic_in_v(u, v):
    a = surface_point(SurfaceCoord(u, v), GEOM)
    b = surface_point(SurfaceCoord(u, v + 2 * math.pi), GEOM)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_surface_grid_matches_scalar_map():
    u = np.linspace(-1.2, 1.2, 7)
    v = np.linspace(-3.0, 3.0, 7)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = surface_grid(uu, vv, GEOM)
    for i in range(7):
        for j in range(7):
            np.testing.assert_allclose(
                pts[i, j], surface_point(SurfaceCoord(u[i], v[j]), GEOM), atol=1e-12)


def test_surface_normal_is_unit_and_outward():
    u = np.linspace(-0.6, 0.6, 5)
    v = np.linspace(-3.0, 3.0, 5)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    n = surface_normal(uu, vv, GEOM)
    np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-12)
    # Outward: stepping along the normal must increase the implicit-surface
    # residual (sqrt(x^2+y^2) + D)^2 + z^2 - R^2.
    pts = surface_grid(uu, vv, GEOM)
    for eps in (1e-3,):
        outside = pts + eps * n
        r_out = (np.hypot(outside[..., 0], outside[..., 1]) + GEOM.axis_offset) ** 2 \
            + outside[..., 2] ** 2
        assert np.all(r_out > GEOM.generator_radius ** 2)


def test_geometry_invariants_rejected():
    with pytest.raises(ValueError):
        RollerGeometry(generator_radius=80.0, axis_offset=80.0)
    with pytest.raises(ValueError):
        RollerGeometry(u_min=0.5, u_max=0.5)
    with pytest.raises(ValueError):
        RollerGeometry(u_min=-2.0, u_max=1.0)


# ---------------------------------------------------------------------------
# Fundamental forms
# ---------------------------------------------------------------------------

def test_forms_equator_values():
    forms = fundamental_forms(0.0, GEOM)
    np.testing.assert_allclose(forms.curvature, [[0.01, 0.0], [0.0, 0.05]], atol=1e-15)
    np.testing.assert_allclose(forms.torsion, [[0.0, 0.0]], atol=1e-15)
    np.testing.assert_allclose(forms.metric, [[100.0, 0.0], [0.0, 20.0]], atol=1e-15)


def test_forms_spherical_limit():
    for u in (-0.9, -0.3, 0.0, 0.45, 1.1):
        forms = fundamental_forms(u, SPHERE)
        np.testing.assert_allclose(forms.curvature, 0.01 * np.eye(2), atol=1e-12)


def test_forms_singular_radius():
    with pytest.raises(SingularityError):
        fundamental_forms(0.9, GEOM)


def _fd_frame(u, v, geom, h):
    """Orthonormal surface frame and parameter speeds by central differences."""
    def pt(uu, vv):
        return surface_grid(uu, vv, geom)

    f_u = (pt(u + h, v) - pt(u - h, v)) / (2 * h)
    f_v = (pt(u, v + h) - pt(u, v - h)) / (2 * h)
    su, sv = np.linalg.norm(f_u), np.linalg.norm(f_v)
    x = f_u / su
    y = f_v / sv
    z = np.cross(x, y)
    return x, y, z, su, sv


def _fd_forms(u, geom, h=1e-5):
    """Finite-difference curvature, torsion and metric at longitude u."""
    v = 0.37  # forms are independent of v for a surface of revolution
    x, y, z, su, sv = _fd_frame(u, v, geom, h)
    xp_u, _, zp_u, _, _ = _fd_frame(u + h, v, geom, h)
    xm_u, _, zm_u, _, _ = _fd_frame(u - h, v, geom, h)
    xp_v, _, zp_v, _, _ = _fd_frame(u, v + h, geom, h)
    xm_v, _, zm_v, _, _ = _fd_frame(u, v - h, geom, h)
    z_u = (zp_u - zm_u) / (2 * h)
    z_v = (zp_v - zm_v) / (2 * h)
    x_u = (xp_u - xm_u) / (2 * h)
    x_v = (xp_v - xm_v) / (2 * h)
    curvature = np.array([[x @ z_u / su, x @ z_v / sv],
                          [y @ z_u / su, y @ z_v / sv]])
    torsion = np.array([[y @ x_u / su, y @ x_v / sv]])
    metric = np.diag([su, sv])
    return curvature, torsion, metric


@pytest.mark.parametrize("u", [math.pi / 6, -0.5, 0.05, 0.6])
def test_forms_match_finite_differences(u):
    forms = fundamental_forms(u, GEOM)
    k_fd, t_fd, m_fd = _fd_forms(u, GEOM)
    scale_k = np.abs(forms.curvature).max()
    scale_t = max(np.abs(forms.torsion).max(), scale_k)
    np.testing.assert_allclose(forms.curvature, k_fd, atol=1e-6 * scale_k)
    np.testing.assert_allclose(forms.torsion, t_fd, atol=1e-6 * scale_t)
    np.testing.assert_allclose(forms.metric, m_fd, atol=1e-6 * forms.metric.max())


# ---------------------------------------------------------------------------
# Contact kinematics
# ---------------------------------------------------------------------------

def _state(u=0.0, psi=0.0, k_obj=None, rate=(0.0, 0.0), spin=0.0):
    return ContactKinematicState(
        coord=SurfaceCoord(u, 0.0),
        frame_angle=psi,
        object_curvature=np.zeros((2, 2)) if k_obj is None else k_obj,
        coord_rate=np.asarray(rate, dtype=float),
        roller_rate=spin,
    )


def test_contact_velocity_zero_relative_rate():
    out = contact_object_velocity(_state(u=0.2, rate=(1.7, 0.0), spin=1.7), GEOM)
    assert out == (0.0, 0.0)


def test_contact_velocity_flat_object_rolls_about_x():
    out = contact_object_velocity(_state(u=0.25, rate=(0.0, 1.7)), GEOM)
    assert out[0] == pytest.approx(1.647151116908096, abs=1e-12)  # 1.7 cos 0.25
    assert out[1] == pytest.approx(0.0, abs=1e-15)


def test_contact_velocity_spin_slot_offset():
    # The roller spin rate offsets the first (longitudinal) coordinate slot.
    a = contact_object_velocity(_state(u=0.1, rate=(0.4, 1.0), spin=0.4), GEOM)
    b = contact_object_velocity(_state(u=0.1, rate=(0.0, 1.0), spin=0.0), GEOM)
    np.testing.assert_allclose(a, b, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(
    a=st.tuples(st.floats(-2, 2), st.floats(-2, 2)),
    b=st.tuples(st.floats(-2, 2), st.floats(-2, 2)),
    alpha=st.floats(-3, 3),
    beta=st.floats(-3, 3),
)
def test_contact_velocity_linear_in_rate(a, b, alpha, beta):
    k_obj = np.array([[0.02, 0.005], [0.005, 0.04]])
    mix = (alpha * a[0] + beta * b[0], alpha * a[1] + beta * b[1])
    fa = contact_object_velocity(_state(u=0.3, psi=0.7, k_obj=k_obj, rate=a), GEOM)
    fb = contact_object_velocity(_state(u=0.3, psi=0.7, k_obj=k_obj, rate=b), GEOM)
    fm = contact_object_velocity(_state(u=0.3, psi=0.7, k_obj=k_obj, rate=mix), GEOM)
    np.testing.assert_allclose(
        fm, [alpha * fa[i] + beta * fb[i] for i in range(2)], atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(psi=st.floats(-math.pi, math.pi))
def test_contact_velocity_flat_object_ignores_frame_angle(psi):
    base = contact_object_velocity(_state(u=0.2, psi=0.0, rate=(0.3, 0.9)), GEOM)
    out = contact_object_velocity(_state(u=0.2, psi=psi, rate=(0.3, 0.9)), GEOM)
    np.testing.assert_allclose(out, base, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(psi=st.floats(-math.pi, math.pi))
def test_contact_velocity_sphere_ignores_frame_angle(psi):
    k_obj = np.eye(2) / 30.0
    base = contact_object_velocity(
        _state(u=0.2, psi=0.0, k_obj=k_obj, rate=(0.3, 0.9)), GEOM)
    out = contact_object_velocity(
        _state(u=0.2, psi=psi, k_obj=k_obj, rate=(0.3, 0.9)), GEOM)
    np.testing.assert_allclose(out, base, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(psi=st.floats(-math.pi, math.pi))
def test_frame_operator_is_an_involution(psi):
    r = relative_frame_operator(psi)
    np.testing.assert_allclose(r @ r, np.eye(2), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(-1.0, abs=1e-12)


def _rotvec_matrix(w, dt):
    """Rotation matrix for a constant world angular velocity over dt."""
    from scipy.spatial.transform import Rotation
    return Rotation.from_rotvec(np.asarray(w) * dt).as_matrix()


def test_contact_velocity_matches_rolling_ball_oracle():
    """A ball rolling on a static spherical roller, two independent routes.

    Route 1 drives the ball orientation from the contact velocity map; route
    2 integrates the no-slip constraint directly: the ball centre rides at
    (R + r) along the contact normal and its angular velocity is
    (normal x centre_velocity) / r, with the centre velocity taken by finite
    differences of the contact path.  Neither route sees the other's math.
    """
    radius_ball = 30.0
    k_ball = np.eye(2) / radius_ball
    ride = SPHERE.generator_radius + radius_ball

    def path(t):
        return 0.45 * math.sin(0.9 * t + 0.2), 0.8 * t + 0.3 * math.sin(1.7 * t)

    def path_rate(t):
        return (0.45 * 0.9 * math.cos(0.9 * t + 0.2),
                0.8 + 0.3 * 1.7 * math.cos(1.7 * t))

    def center(t):
        u, v = path(t)
        return ride * surface_normal(u, v, SPHERE)

    dt = 0.02
    rot_formula = np.eye(3)
    rot_oracle = np.eye(3)
    for k in range(100):
        tm = (k + 0.5) * dt

        u, v = path(tm)
        wx, wy = contact_object_velocity(
            ContactKinematicState(
                coord=SurfaceCoord(u, v), frame_angle=0.0,
                object_curvature=k_ball,
                coord_rate=np.asarray(path_rate(tm)), roller_rate=0.0),
            SPHERE)
        xdir, ydir = surface_tangents(u, v, SPHERE)
        # Returned pair is roller-relative-to-ball; the roller is static.
        w_ball = -(wx * xdir + wy * ydir)
        rot_formula = _rotvec_matrix(w_ball, dt) @ rot_formula

        delta = 1e-6
        c_dot = (center(tm + delta) - center(tm - delta)) / (2 * delta)
        w_oracle = np.cross(surface_normal(u, v, SPHERE), c_dot) / radius_ball
        rot_oracle = _rotvec_matrix(w_oracle, dt) @ rot_oracle

    residual = rot_oracle.T @ rot_formula
    angle = math.acos(min(1.0, max(-1.0, (np.trace(residual) - 1.0) / 2.0)))
    assert angle < 1e-4


def test_contact_velocity_singular_coordinate():
    with pytest.raises(SingularityError):
        contact_object_velocity(_state(u=0.9, rate=(0.0, 1.0)), GEOM)


# ---------------------------------------------------------------------------
# Hand forward kinematics
# ---------------------------------------------------------------------------

def _mirror_y(p):
    return np.array([p[0], -p[1], p[2]])


def test_fk_zero_joints_mirrored():
    frames = fk_contact_frames({"A": (0.0, 0.0, 0.0), "B": (0.0, 0.0, 0.0)},
                               HAND, GEOM)
    a, b = frames["A"], frames["B"]
    np.testing.assert_allclose(a.roller_center, [0.0, 20.0, HAND.link3], atol=1e-12)
    np.testing.assert_allclose(b.roller_center, _mirror_y(a.roller_center), atol=1e-12)
    # Contact axes face each other; rolling directions coincide.
    np.testing.assert_allclose(a.stator.rotation[:, 0], [0.0, -1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(b.stator.rotation[:, 0], [0.0, 1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(a.stator.rotation[:, 1], [0.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(b.stator.rotation[:, 1], [0.0, 0.0, 1.0], atol=1e-12)
    for f in (a, b):
        r = f.stator.rotation
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_fk_pivot_half_turn_flips_roll_axis():
    half = math.pi / 2
    plus = fk_contact_frames({"A": (0.0, half, 0.0)}, HAND, GEOM)["A"]
    minus = fk_contact_frames({"A": (0.0, -half, 0.0)}, HAND, GEOM)["A"]
    z_plus = plus.stator.rotation[:, 2]
    z_minus = minus.stator.rotation[:, 2]
    assert z_plus @ z_minus == pytest.approx(-1.0, abs=1e-12)
    np.testing.assert_allclose(plus.stator.rotation[:, 1], [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(minus.stator.rotation[:, 1], [-1.0, 0.0, 0.0], atol=1e-12)


def test_fk_full_opening():
    half = math.pi / 2
    frames = fk_contact_frames({"A": (half, 0.0, 0.0), "B": (half, 0.0, 0.0)},
                               HAND, GEOM)
    gap = (frames["A"].roller_center[1] - frames["B"].roller_center[1]
           - 2.0 * GEOM.max_radius)
    assert gap == pytest.approx(HAND.max_opening, abs=1e-9)


def test_fk_roll_angle_spins_about_revolution_axis():
    frames = fk_contact_frames({"A": (0.3, 0.4, 1.1)}, HAND, GEOM)["A"]
    np.testing.assert_allclose(
        frames.rotor.rotation[:, 2], frames.stator.rotation[:, 2], atol=1e-12)
    expected_x = (math.cos(1.1) * frames.stator.rotation[:, 0]
                  + math.sin(1.1) * frames.stator.rotation[:, 1])
    np.testing.assert_allclose(frames.rotor.rotation[:, 0], expected_x, atol=1e-12)


def test_fk_joint_limits():
    with pytest.raises(JointRangeError):
        fk_contact_frames({"A": (-0.1, 0.0, 0.0)}, HAND, GEOM)
    with pytest.raises(JointRangeError):
        fk_contact_frames({"A": (0.0, 2.0, 0.0)}, HAND, GEOM)


def test_opening_monotone_in_base_angle():
    angles = np.linspace(0.0, math.pi / 2, 25)
    gaps = [opening_from_base(a, HAND) for a in angles]
    assert all(b > a for a, b in zip(gaps, gaps[1:]))
    assert gaps[0] == 0.0


def test_hand_params_rejected():
    with pytest.raises(ValueError):
        HandParams(link2=-1.0)
    with pytest.raises(ValueError):
        HandParams(pivot_range=2.0)


def test_pose_compose_inverse_round_trip():
    rng = np.random.default_rng(7)
    from scipy.spatial.transform import Rotation
    p = Pose(Rotation.random(random_state=3).as_matrix(), rng.normal(size=3))
    q = Pose(Rotation.random(random_state=4).as_matrix(), rng.normal(size=3))
    pts = rng.normal(size=(5, 3))
    np.testing.assert_allclose(
        p.compose(q).transform(pts), p.transform(q.transform(pts)), atol=1e-12)
    np.testing.assert_allclose(
        p.inverse().transform(p.transform(pts)), pts, atol=1e-12)
