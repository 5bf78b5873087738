"""Tactile perception: rectified frames to depth, shear, and contact state."""

from .depth import DepthImage, SolveInfo, inpaint_markers, photometric_depth, \
    poisson_integrate, reconstruct_3d
from .markers import MarkerMatch, TrackParams, assignment_loss, \
    detect_markers, marker_mask, track_markers
from .pipeline import PerceptParams, PerceptPipeline, PerceptResult, \
    save_debug_dump
from .reference import LookupResult, ReferenceEntry, ReferenceError, \
    ReferenceTable, build_reference_table, encoder_descriptor, lookup_reference
from .summary import ContactState, contact_summary

__all__ = [
    "ContactState", "DepthImage", "LookupResult", "MarkerMatch",
    "PerceptParams", "PerceptPipeline", "PerceptResult", "ReferenceEntry",
    "ReferenceError", "ReferenceTable", "SolveInfo", "TrackParams",
    "assignment_loss", "build_reference_table", "contact_summary",
    "detect_markers", "encoder_descriptor", "inpaint_markers", "marker_mask",
    "photometric_depth", "poisson_integrate", "reconstruct_3d",
    "save_debug_dump", "track_markers", "lookup_reference",
]
