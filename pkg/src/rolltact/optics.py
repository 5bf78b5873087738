"""Camera model, calibration, pixel-surface correspondence, and unwarping.

The tactile camera sits inside the roller shell and views the sensing window
through a fold mirror.  The mirror is modeled as a single planar reflection:
tracing a pixel ray reflects its origin and direction across the plane, and
projecting a surface point reflects the point before the pinhole map.  With
the mirror disabled the camera views the window directly (used by unit tests
and by calibration, which recovers the pinhole model only).

Pixel convention: a pixel is the float pair (column, row); the intrinsic
matrix maps camera x to columns and camera y to rows.  All world quantities
are expressed in the stator (sensor) frame of one finger, the same frame the
extrinsics are defined in.

Rectified-image convention: rows sweep the longitudinal angle u (top row is
+u), columns sweep the circumferential angle v (left column is -v), with
equal metric pixel density along both axes.
"""

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .config import Config
from .geometry import Pose, RollerGeometry, geometry_from_config


class OpticsError(Exception):
    """Base for camera and surface-map failures."""


class ProjectionError(OpticsError):
    """Point behind the camera."""


class CalibrationError(OpticsError):
    """Calibration could not produce a trustworthy model."""


class SurfaceMapError(OpticsError):
    """Pixel-surface map construction produced no valid pixels."""


class ShapeMismatchError(OpticsError):
    """Frame resolution does not match the camera."""


CAMERA_FILE_VERSION = 1


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MirrorPlane:
    """Reflecting plane given by a point on it and a unit normal."""
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("mirror normal must be nonzero")
        object.__setattr__(self, "normal", _frozen(n / norm))
        object.__setattr__(self, "point", _frozen(self.point))

    def reflect_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        d = (pts - self.point) @ self.normal
        return pts - 2.0 * d[..., None] * self.normal

    def reflect_dirs(self, dirs: np.ndarray) -> np.ndarray:
        dirs = np.asarray(dirs, dtype=float)
        return dirs - 2.0 * (dirs @ self.normal)[..., None] * self.normal

    def side(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.point) @ self.normal


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with optional radial distortion and fold mirror."""
    intrinsics: np.ndarray        # 3x3, px
    rotation: np.ndarray          # 3x3, stator -> camera
    translation: np.ndarray       # 3, mm
    resolution: tuple[int, int]   # (width, height) px
    fov_deg: float
    distortion: tuple[float, float] = (0.0, 0.0)
    mirror: MirrorPlane | None = None

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=float)
        r = np.asarray(self.rotation, dtype=float)
        if k.shape != (3, 3) or np.abs(np.tril(k, -1)).max() > 1e-12:
            raise ValueError("intrinsics must be upper-triangular 3x3")
        if k[0, 0] <= 0 or k[1, 1] <= 0 or abs(k[2, 2] - 1.0) > 1e-12:
            raise ValueError("focal terms must be positive, K[2][2] = 1")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation must be orthonormal within 1e-9")
        object.__setattr__(self, "intrinsics", _frozen(k))
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(self.translation))
        object.__setattr__(self, "resolution",
                           (int(self.resolution[0]), int(self.resolution[1])))

    @property
    def center(self) -> np.ndarray:
        """Camera center in the stator frame."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CalibrationReport:
    rms_px: float
    per_view_rms_px: np.ndarray
    n_views: int


@dataclass(frozen=True)
class CheckerBoard:
    """Planar target; rows x cols inner corners, square edge in mm."""
    rows: int = 7
    cols: int = 8
    square_mm: float = 3.0

    def object_points(self) -> np.ndarray:
        g = np.mgrid[0:self.cols, 0:self.rows].T.reshape(-1, 2)
        pts = np.zeros((self.rows * self.cols, 3))
        pts[:, :2] = g * self.square_mm
        return pts


@dataclass(frozen=True)
class PixelSurfaceMap:
    """Per-pixel surface correspondence plus the rectified sampling grid.

    ``surface_u``/``surface_v`` give the patch coordinate seen by each camera
    pixel, ``points``/``normals`` the 3D point and outward normal in the
    stator frame, ``valid`` the pixels that hit the patch.  ``grid_u``/
    ``grid_v`` are the rectified image axes and ``grid_pixels`` the source
    pixel (column, row) for each rectified cell.
    """
    surface_u: np.ndarray
    surface_v: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    valid: np.ndarray
    grid_u: np.ndarray
    grid_v: np.ndarray
    grid_pixels: np.ndarray
    grid_valid: np.ndarray
    px_per_mm: float

    @property
    def grid_shape(self) -> tuple[int, int]:
        return len(self.grid_u), len(self.grid_v)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def _distort(xn: np.ndarray, yn: np.ndarray, k1: float, k2: float):
    r2 = xn * xn + yn * yn
    f = 1.0 + r2 * (k1 + k2 * r2)
    return xn * f, yn * f


def _undistort(xd: np.ndarray, yd: np.ndarray, k1: float, k2: float):
    xn, yn = xd.copy(), yd.copy()
    for _ in range(8):
        r2 = xn * xn + yn * yn
        f = 1.0 + r2 * (k1 + k2 * r2)
        xn, yn = xd / f, yd / f
    return xn, yn


def project_points(points: np.ndarray, cam: CameraModel):
    """Vectorized pinhole projection; returns (pixels (..., 2), valid mask)."""
    pts = np.asarray(points, dtype=float)
    if cam.mirror is not None:
        pts = cam.mirror.reflect_points(pts)
    x = pts @ cam.rotation.T + cam.translation
    depth = x[..., 2]
    valid = depth > 1e-9
    safe = np.where(valid, depth, 1.0)
    xn, yn = x[..., 0] / safe, x[..., 1] / safe
    xd, yd = _distort(xn, yn, *cam.distortion)
    k = cam.intrinsics
    col = k[0, 0] * xd + k[0, 1] * yd + k[0, 2]
    row = k[1, 1] * yd + k[1, 2]
    return np.stack([col, row], axis=-1), valid


def project(point, cam: CameraModel) -> tuple[float, float]:
    """Project one stator-frame point; raises if it is behind the camera."""
    px, valid = project_points(np.asarray(point, dtype=float)[None, :], cam)
    if not valid[0]:
        raise ProjectionError("point projects behind the camera")
    return float(px[0, 0]), float(px[0, 1])


def pixel_rays(pixels: np.ndarray, cam: CameraModel):
    """World-space rays for float (column, row) pixels, mirror applied.

    Returns (origin (3,), dirs (..., 3)); directions are unit length.
    """
    px = np.asarray(pixels, dtype=float)
    k = cam.intrinsics
    xd = (px[..., 0] - k[0, 2]) / k[0, 0]
    yd = (px[..., 1] - k[1, 2]) / k[1, 1]
    xn, yn = _undistort(xd, yd, *cam.distortion)
    dirs_cam = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    dirs = dirs_cam @ cam.rotation  # == R.T applied to each row
    origin = cam.center
    if cam.mirror is not None:
        origin = cam.mirror.reflect_points(origin)
        dirs = cam.mirror.reflect_dirs(dirs)
    return origin, dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Default rig construction
# ---------------------------------------------------------------------------

def _intrinsics_for(width: int, height: int, fov_deg: float) -> np.ndarray:
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return np.array([[f, 0.0, (width - 1) / 2.0],
                     [0.0, f, (height - 1) / 2.0],
                     [0.0, 0.0, 1.0]])


def _virtual_pose(geom: RollerGeometry, view_distance: float):
    """Camera that views the window centre head-on from inside the shell."""
    center = np.array([geom.max_radius - view_distance, 0.0, 0.0])
    # Rows of R are the camera axes in the stator frame: columns track +v
    # (world -Y), rows track -u (world -Z), optical axis +X.
    rot = np.array([[0.0, -1.0, 0.0],
                    [0.0, 0.0, -1.0],
                    [1.0, 0.0, 0.0]])
    return rot, center


def camera_from_config(cfg: Config, *, with_mirror: bool | None = None) -> CameraModel:
    """Build the default rig camera; mirror per config unless overridden."""
    geom = geometry_from_config(cfg)
    width = cfg.get_int("camera", "width_px")
    height = cfg.get_int("camera", "height_px")
    fov = cfg.get_float("camera", "fov_deg")
    rot_v, c_virt = _virtual_pose(geom, cfg.get_float("camera", "view_distance_mm"))
    dist = (cfg.get_float("camera", "k1"), cfg.get_float("camera", "k2"))
    enabled = cfg.get_bool("camera", "mirror_enabled") if with_mirror is None \
        else with_mirror
    if not enabled:
        return CameraModel(
            intrinsics=_intrinsics_for(width, height, fov),
            rotation=rot_v, translation=-rot_v @ c_virt,
            resolution=(width, height), fov_deg=fov, distortion=dist, mirror=None)
    tilt = math.radians(cfg.get_float("camera", "mirror_tilt_deg"))
    mirror = MirrorPlane(
        point=np.asarray(cfg.get_vec("camera", "mirror_point_mm")),
        normal=np.array([math.sin(tilt), 0.0, math.cos(tilt)]))
    # Real camera = mirror image of the virtual one; the parity flip keeps
    # the rotation proper and reproduces the virtual view pixel-for-pixel up
    # to the column flip a mirror performs.
    flip = np.diag([-1.0, 1.0, 1.0])
    householder = np.eye(3) - 2.0 * np.outer(mirror.normal, mirror.normal)
    rot_r = flip @ rot_v @ householder
    c_real = mirror.reflect_points(c_virt)
    return CameraModel(
        intrinsics=_intrinsics_for(width, height, fov),
        rotation=rot_r, translation=-rot_r @ c_real,
        resolution=(width, height), fov_deg=fov, distortion=dist, mirror=mirror)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def synthesize_observation(board: CheckerBoard, pose: Pose, cam: CameraModel,
                           noise_px: float = 0.0, rng=None):
    """Project the board at the given stator-frame pose into the camera."""
    pts = pose.transform(board.object_points())
    px, valid = project_points(pts, cam)
    if not np.all(valid):
        raise ProjectionError("board corner behind the camera")
    if noise_px > 0.0:
        rng = np.random.default_rng(rng)
        px = px + rng.normal(scale=noise_px, size=px.shape)
    return pose, px


def calibrate(observations, board: CheckerBoard,
              resolution: tuple[int, int]) -> tuple[CameraModel, CalibrationReport]:
    """Planar-target calibration from (board pose, corner pixels) pairs.

    Intrinsics and distortion come from all views; extrinsics from the first
    view whose board pose is known in the stator frame.  Poses may be None
    for views used only for intrinsics.
    """
    if len(observations) < 6:
        raise CalibrationError(
            f"need at least 6 observations, got {len(observations)}")
    obj = board.object_points().astype(np.float32)
    img_pts = [np.asarray(px, dtype=np.float32).reshape(-1, 1, 2)
               for _, px in observations]
    obj_pts = [obj.reshape(-1, 1, 3)] * len(observations)
    criteria = (cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 200, 1e-14)
    flags = cv2.CALIB_ZERO_TANGENT_DIST | cv2.CALIB_FIX_K3
    rms, k, dist, _, _ = cv2.calibrateCamera(
        obj_pts, img_pts, resolution, None, None, flags=flags, criteria=criteria)
    if not np.isfinite(rms) or rms > 5.0:
        raise CalibrationError(
            f"calibration diverged: rms {rms:.3f} px over {len(observations)} views")
    k1, k2 = float(dist.flat[0]), float(dist.flat[1])

    anchor = next((i for i, (pose, _) in enumerate(observations)
                   if pose is not None), None)
    if anchor is None:
        raise CalibrationError("no observation has a known board pose")
    ok, rvec, tvec = cv2.solvePnP(
        obj, np.asarray(observations[anchor][1], dtype=np.float64), k,
        np.array([k1, k2, 0.0, 0.0]), flags=cv2.SOLVEPNP_ITERATIVE)
    if not ok:
        raise CalibrationError("anchor pose estimation failed")
    r_board_cam, _ = cv2.Rodrigues(rvec)
    pose = observations[anchor][0]
    rot = r_board_cam @ pose.rotation.T
    # Re-orthonormalize: cv2 results carry ~1e-12 drift.
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    trans = tvec.ravel() - rot @ pose.translation

    cam = CameraModel(intrinsics=k, rotation=rot, translation=trans,
                      resolution=resolution,
                      fov_deg=math.degrees(
                          2 * math.atan(0.5 * resolution[0] / k[0, 0])),
                      distortion=(k1, k2), mirror=None)
    per_view = []
    for pose_i, px in observations:
        if pose_i is None:
            continue
        ref, _ = project_points(pose_i.transform(board.object_points()), cam)
        per_view.append(float(np.sqrt(np.mean(
            np.sum((ref - np.asarray(px)) ** 2, axis=-1)))))
    return cam, CalibrationReport(rms_px=float(rms),
                                  per_view_rms_px=np.asarray(per_view),
                                  n_views=len(observations))


# ---------------------------------------------------------------------------
# Pixel-surface map
# ---------------------------------------------------------------------------

def _implicit(points: np.ndarray, geom: RollerGeometry) -> np.ndarray:
    """Signed residual of the shell surface; negative inside the shell."""
    rho = np.hypot(points[..., 0], points[..., 1])
    return (rho + geom.axis_offset) ** 2 + points[..., 2] ** 2 \
        - geom.generator_radius ** 2


def _march_rays(origin: np.ndarray, dirs: np.ndarray, geom: RollerGeometry,
                t_max: float = 260.0, step: float = 0.5, iters: int = 50):
    """First shell crossing per ray by coarse march plus bisection."""
    flat = dirs.reshape(-1, 3)
    n = len(flat)
    t_lo = np.zeros(n)
    t_hi = np.zeros(n)
    found = np.zeros(n, dtype=bool)
    prev_t = np.full(n, 1e-6)
    prev_f = _implicit(origin + prev_t[:, None] * flat, geom)
    for t in np.arange(step, t_max + step, step):
        f = _implicit(origin + t * flat, geom)
        cross = (~found) & (prev_f < 0.0) & (f >= 0.0)
        t_lo[cross] = prev_t[cross]
        t_hi[cross] = t
        found |= cross
        prev_f = f
        prev_t.fill(t)
        if found.all():
            break
    idx = np.nonzero(found)[0]
    lo, hi = t_lo[idx], t_hi[idx]
    sub = flat[idx]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f = _implicit(origin + mid[:, None] * sub, geom)
        neg = f < 0.0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    t_hit = np.full(n, np.nan)
    t_hit[idx] = 0.5 * (lo + hi)
    return t_hit.reshape(dirs.shape[:-1]), found.reshape(dirs.shape[:-1])


def build_surface_map(geom: RollerGeometry, cam: CameraModel, *,
                      u_window: float, v_window: float,
                      px_per_mm: float) -> PixelSurfaceMap:
    """Trace every pixel to the shell and lay out the rectified grid."""
    w, h = cam.resolution
    cols, rows = np.meshgrid(np.arange(w, dtype=float),
                             np.arange(h, dtype=float))
    origin, dirs = pixel_rays(np.stack([cols, rows], axis=-1), cam)
    if _implicit(origin[None, :], geom)[0] >= 0.0:
        raise SurfaceMapError("effective camera center is outside the shell")
    t_hit, found = _march_rays(origin, dirs, geom)
    pts = origin + np.nan_to_num(t_hit)[..., None] * dirs
    z_ratio = np.clip(pts[..., 2] / geom.generator_radius, -1.0, 1.0)
    u = np.arcsin(z_ratio)
    v = np.arctan2(-pts[..., 1], pts[..., 0])
    valid = found & (u >= geom.u_min) & (u <= geom.u_max)
    cu = np.cos(u)
    normals = np.stack([cu * np.cos(v), -cu * np.sin(v), np.sin(u)], axis=-1)

    du = (1.0 / px_per_mm) / geom.generator_radius
    dv = (1.0 / px_per_mm) / geom.max_radius
    n_u = int(round(2.0 * u_window / du)) + 1
    n_v = int(round(2.0 * v_window / dv)) + 1
    grid_u = np.linspace(u_window, -u_window, n_u)
    grid_v = np.linspace(-v_window, v_window, n_v)
    uu, vv = np.meshgrid(grid_u, grid_v, indexing="ij")
    rho = geom.parallel_radius(uu)
    grid_pts = np.stack([rho * np.cos(vv), -rho * np.sin(vv),
                         geom.generator_radius * np.sin(uu)], axis=-1)
    grid_px, in_front = project_points(grid_pts, cam)
    grid_valid = in_front \
        & (grid_px[..., 0] >= 0.0) & (grid_px[..., 0] <= w - 1.0) \
        & (grid_px[..., 1] >= 0.0) & (grid_px[..., 1] <= h - 1.0)
    if not valid.any() or not grid_valid.any():
        raise SurfaceMapError("no pixel reaches the sensing surface")
    return PixelSurfaceMap(
        surface_u=_frozen(u), surface_v=_frozen(v),
        points=_frozen(pts), normals=_frozen(normals),
        valid=valid.copy(),
        grid_u=_frozen(grid_u), grid_v=_frozen(grid_v),
        grid_pixels=_frozen(grid_px), grid_valid=grid_valid.copy(),
        px_per_mm=float(px_per_mm))


def surface_map_from_config(cfg: Config, cam: CameraModel | None = None,
                            geom: RollerGeometry | None = None) -> PixelSurfaceMap:
    geom = geometry_from_config(cfg) if geom is None else geom
    cam = camera_from_config(cfg) if cam is None else cam
    return build_surface_map(
        geom, cam,
        u_window=cfg.get_float("sensing", "u_window_rad"),
        v_window=cfg.get_float("sensing", "v_window_rad"),
        px_per_mm=cfg.get_float("sensing", "unwarp_px_per_mm"))


def unwarp(frame: np.ndarray, pmap: PixelSurfaceMap,
           cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Resample a raw frame onto the rectified (u, v) grid.

    Returns (rectified, valid_mask); invalid cells hold zeros and are
    reported through the mask rather than an in-band sentinel color.
    """
    w, h = cam.resolution
    if frame.shape[0] != h or frame.shape[1] != w:
        raise ShapeMismatchError(
            f"frame {frame.shape[1]}x{frame.shape[0]} vs camera {w}x{h}")
    map_x = pmap.grid_pixels[..., 0].astype(np.float32)
    map_y = pmap.grid_pixels[..., 1].astype(np.float32)
    rect = cv2.remap(frame, map_x, map_y, cv2.INTER_LINEAR,
                     borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    out = rect.astype(frame.dtype, copy=False)
    mask = pmap.grid_valid
    if out.ndim == 3:
        out = out * mask[..., None].astype(out.dtype) if out.dtype != np.uint8 \
            else out * mask[..., None]
    else:
        out = out * mask.astype(out.dtype)
    return out, mask.copy()


# ---------------------------------------------------------------------------
# Calibration file I/O
# ---------------------------------------------------------------------------

def _fmt(values) -> str:
    return " ".join(format(float(x), ".17g") for x in np.ravel(values))


def save_camera(cam: CameraModel, path) -> None:
    lines = [
        f"format_version {CAMERA_FILE_VERSION}",
        f"resolution {cam.resolution[0]} {cam.resolution[1]}",
        f"fov_deg {_fmt([cam.fov_deg])}",
        f"intrinsics {_fmt(cam.intrinsics)}",
        f"extrinsics {_fmt(np.hstack([cam.rotation, cam.translation[:, None]]))}",
        f"distortion {_fmt(cam.distortion)}",
        f"mirror_enabled {0 if cam.mirror is None else 1}",
    ]
    if cam.mirror is not None:
        lines.append(f"mirror_point {_fmt(cam.mirror.point)}")
        lines.append(f"mirror_normal {_fmt(cam.mirror.normal)}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_camera(path) -> CameraModel:
    fields: dict[str, list[str]] = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, *rest = line.split()
            fields[key] = rest
    try:
        version = int(fields["format_version"][0])
        if version != CAMERA_FILE_VERSION:
            raise OpticsError(f"unsupported camera file version {version}")
        res = (int(fields["resolution"][0]), int(fields["resolution"][1]))
        ext = np.array([float(x) for x in fields["extrinsics"]]).reshape(3, 4)
        mirror = None
        if int(fields["mirror_enabled"][0]):
            mirror = MirrorPlane(
                point=np.array([float(x) for x in fields["mirror_point"]]),
                normal=np.array([float(x) for x in fields["mirror_normal"]]))
        return CameraModel(
            intrinsics=np.array(
                [float(x) for x in fields["intrinsics"]]).reshape(3, 3),
            rotation=ext[:, :3], translation=ext[:, 3],
            resolution=res, fov_deg=float(fields["fov_deg"][0]),
            distortion=(float(fields["distortion"][0]),
                        float(fields["distortion"][1])),
            mirror=mirror)
    except (KeyError, ValueError, IndexError) as exc:
        raise OpticsError(f"malformed camera file {path}: {exc}") from exc
