"""Frame-rate perception: unwarp, angle lookup, depth, markers, summary."""

import json
import time
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from ..config import Config
from ..optics import CameraModel, PixelSurfaceMap, unwarp
from ..synth import LightingModel, SensorRig, TactileFrame
from .depth import DepthImage, photometric_depth, reconstruct_3d
from .markers import MarkerMatch, TrackParams, detect_markers, marker_mask, \
    track_markers
from .reference import LookupResult, ReferenceTable, lookup_reference
from .summary import ContactState, contact_summary


@dataclass(frozen=True)
class PerceptParams:
    track: TrackParams
    marker_radius_px: float
    contact_threshold_mm: float
    noise_floor_mm: float
    detect_drop: float

    @classmethod
    def from_config(cls, cfg: Config) -> "PerceptParams":
        pitch_px = cfg.get_float("markers", "pitch_mm") \
            * cfg.get_float("sensing", "unwarp_px_per_mm")
        return cls(
            track=TrackParams(
                match_radius_px=cfg.get_float("percept", "match_radius_px"),
                mismatch_penalty=cfg.get_float("percept", "mismatch_penalty"),
                neighbor_radius_px=cfg.get_float(
                    "percept", "neighbor_radius_factor") * pitch_px,
                n_samples=cfg.get_int("percept", "n_samples"),
                sigmoid_slope=cfg.get_float("percept", "sigmoid_slope")),
            marker_radius_px=cfg.get_float("markers", "radius_mm")
            * cfg.get_float("sensing", "unwarp_px_per_mm"),
            contact_threshold_mm=cfg.get_float(
                "percept", "contact_threshold_factor")
            * cfg.get_float("percept", "noise_floor_mm"),
            noise_floor_mm=cfg.get_float("percept", "noise_floor_mm"),
            detect_drop=cfg.get_float("percept", "marker_detect_drop"))


@dataclass(frozen=True)
class PerceptResult:
    frame_index: int
    lookup: LookupResult
    rect: np.ndarray
    depth: DepthImage
    markers: np.ndarray
    ref_markers: np.ndarray
    match: MarkerMatch | None
    state: ContactState
    timings_ms: dict


class PerceptPipeline:
    """Stateful per-frame processor bound to one sensor rig and table."""

    def __init__(self, table: ReferenceTable, rig: SensorRig,
                 params: PerceptParams, seed: int = 0):
        self.table = table
        self.rig = rig
        self.params = params
        self.rng = np.random.default_rng(seed)

    def process(self, frame: TactileFrame) -> PerceptResult:
        t = {}
        tic = time.perf_counter()
        rect, _ = unwarp(frame.image, self.rig.pmap, self.rig.cam)
        t["unwarp"] = time.perf_counter() - tic

        tic = time.perf_counter()
        lookup = lookup_reference(rect, self.table)
        entry = self.table.entries[lookup.index]
        t["lookup"] = time.perf_counter() - tic

        tic = time.perf_counter()
        markers = detect_markers(rect, band_px=self.table.band_px,
                                 drop=self.params.detect_drop)
        match = track_markers(entry.markers, markers, self.params.track,
                              rng=self.rng) if lookup.accepted else None
        t["markers"] = time.perf_counter() - tic

        tic = time.perf_counter()
        mmask = marker_mask(rect.shape[:2],
                            np.vstack([entry.markers, markers])
                            if len(markers) else entry.markers,
                            self.params.marker_radius_px)
        depth = photometric_depth(
            rect, entry.rect, self.rig.lights, self.rig.pmap.px_per_mm,
            marker_mask=mmask, exclude_rows=self.table.band_px + 2,
            threshold_mm=self.params.contact_threshold_mm,
            max_depth_mm=self.rig.geom.elastomer_thickness)
        t["depth"] = time.perf_counter() - tic

        tic = time.perf_counter()
        state = contact_summary(depth, match, entry.markers,
                                self.rig.pmap.grid_u, self.rig.pmap.grid_v,
                                self.rig.pmap.px_per_mm)
        t["summary"] = time.perf_counter() - tic

        return PerceptResult(
            frame_index=frame.index, lookup=lookup, rect=rect, depth=depth,
            markers=markers, ref_markers=entry.markers, match=match,
            state=state, timings_ms={k: v * 1000.0 for k, v in t.items()})


def save_debug_dump(result: PerceptResult, out_dir) -> None:
    """Inspection artifacts: 16-bit depth, marker records, contact metadata.

    Depth is stored as micrometers in 16-bit grayscale PNG.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{result.frame_index:06d}"
    depth_um = np.rint(np.clip(result.depth.values * 1000.0,
                               0, 65535)).astype(np.uint16)
    cv2.imwrite(str(out / f"{stem}_depth.png"), depth_um)
    cv2.imwrite(str(out / f"{stem}_rect.png"),
                cv2.cvtColor(result.rect, cv2.COLOR_RGB2BGR))

    lines = ["# ref_row ref_col cur_row cur_col d_row d_col matched"]
    if result.match is not None:
        for i, (row, col) in enumerate(result.ref_markers):
            j = result.match.assignment[i]
            d = result.match.displacements[i]
            lines.append(f"{row:.3f} {col:.3f} {row + d[0]:.3f} "
                         f"{col + d[1]:.3f} {d[0]:.3f} {d[1]:.3f} "
                         f"{int(j >= 0)}")
    (out / f"{stem}_markers.txt").write_text("\n".join(lines) + "\n")

    state = result.state
    meta = {
        "frame_index": result.frame_index,
        "roller_angle": result.lookup.angle,
        "lookup_accepted": result.lookup.accepted,
        "in_contact": state.in_contact,
        "centroid_px": list(state.centroid_px) if state.centroid_px else None,
        "area_mm2": state.area_mm2,
        "max_depth_mm": state.max_depth_mm,
        "mean_shear_px": [float(x) for x in state.mean_shear_px],
        "torsion_rad": state.torsion_rad,
        "saturated": result.depth.saturated,
        "timings_ms": result.timings_ms,
    }
    with open(out / f"{stem}_contact.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
