"""Roller-angle lookup against a table of contact-free reference frames.

Each table entry keys a rectified reference frame by its encoder-strip
profile.  At run time the current frame's profile is matched by L2 distance;
the winning entry supplies the roller angle, the difference-image baseline,
and the resting marker positions.
"""

import math
from dataclasses import dataclass

import numpy as np

from ..optics import CameraModel, PixelSurfaceMap, unwarp
from .markers import detect_markers


class ReferenceError(ValueError):
    """Reference table construction or lookup failed."""


@dataclass(frozen=True)
class ReferenceEntry:
    angle: float
    rect: np.ndarray         # rectified uint8 RGB
    descriptor: np.ndarray   # encoder band profile, float
    markers: np.ndarray      # (M, 2) resting marker centers, px


@dataclass(frozen=True)
class ReferenceTable:
    entries: tuple[ReferenceEntry, ...]
    band_px: int
    bit_angle: float         # angular width of one encoder bit, rad
    reject_distance: float

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class LookupResult:
    index: int
    angle: float
    distance: float
    accepted: bool


def encoder_descriptor(rect: np.ndarray, band_px: int) -> np.ndarray:
    """Column profile of the encoder band, normalized to [0, 1]."""
    band = rect[:band_px].astype(float)
    if rect.dtype == np.uint8:
        band = band / 255.0
    return band.mean(axis=(0, 2))


def build_reference_table(spin, pmap: PixelSurfaceMap, cam: CameraModel,
                          band_px: int, bit_px: float,
                          reject_factor: float = 0.9) -> ReferenceTable:
    """Table from (angle, frame) pairs of a contact-free reference spin.

    Consecutive angular gaps wider than twice the encoder bit width are an
    error: the strip could then change by more than one bit between entries
    and lookups would alias.  Duplicate encoder windows are also an error.

    The rejection threshold scales with the spacing of the entries
    themselves: a probe farther from its best entry than entries are from
    each other cannot be assigned an angle meaningfully.
    """
    if len(spin) < 2:
        raise ReferenceError("reference spin needs at least two frames")
    order = np.argsort([a for a, _ in spin])
    entries = []
    dv = abs(pmap.grid_v[1] - pmap.grid_v[0])
    bit_angle = bit_px * dv
    for k in order:
        angle, frame = spin[k]
        rect, _ = unwarp(frame.image, pmap, cam)
        descriptor = encoder_descriptor(rect, band_px)
        markers = detect_markers(rect, band_px=band_px)
        entries.append(ReferenceEntry(angle=float(angle), rect=rect,
                                      descriptor=descriptor, markers=markers))

    angles = np.array([e.angle for e in entries])
    gaps = np.diff(np.concatenate([angles, [angles[0] + 2 * math.pi]]))
    max_gap = float(gaps.max())
    if max_gap > 2.0 * bit_angle + 1e-12:
        raise ReferenceError(
            f"angular gap {max_gap:.4f} rad exceeds twice the encoder bit "
            f"width {bit_angle:.4f} rad")

    desc = np.stack([e.descriptor for e in entries])
    d2 = np.sum((desc[:, None, :] - desc[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    nearest = np.sqrt(d2.min(axis=1))
    if np.any(nearest < 1e-9):
        raise ReferenceError("duplicate encoder windows in the table")
    reject = reject_factor * float(np.median(nearest))
    return ReferenceTable(entries=tuple(entries), band_px=band_px,
                          bit_angle=bit_angle, reject_distance=reject)


def lookup_reference(rect: np.ndarray, table: ReferenceTable) -> LookupResult:
    """Best table entry for a rectified frame by encoder profile distance."""
    probe = encoder_descriptor(rect, table.band_px)
    desc = np.stack([e.descriptor for e in table.entries])
    dist = np.linalg.norm(desc - probe, axis=1)
    best = int(np.argmin(dist))
    d = float(dist[best])
    return LookupResult(index=best, angle=table.entries[best].angle,
                        distance=d, accepted=d <= table.reject_distance)
