"""Marker detection and probabilistic tracking on rectified frames.

Tracking samples many candidate assignments by random optimization: markers
are matched sequentially with probabilities that fall off sigmoidally with
distance, each sample is scored by a smoothness-plus-mismatch loss, and the
best sample wins.  Sample zero is always the deterministic greedy
nearest-neighbor assignment, so the result never scores worse than that
baseline.
"""

from dataclasses import dataclass

import cv2
import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist


@dataclass(frozen=True)
class TrackParams:
    match_radius_px: float = 15.0
    mismatch_penalty: float = 30.0
    neighbor_radius_px: float = 36.0
    n_samples: int = 200
    sigmoid_slope: float = 1.0


@dataclass(frozen=True)
class MarkerMatch:
    """Assignment of reference markers to current detections.

    assignment[i] is the index of the matched current marker or -1; the
    displacement of an unmatched marker is interpolated from its matched
    neighbors.
    """
    assignment: np.ndarray        # (R,) int
    displacements: np.ndarray     # (R, 2) px
    loss: float
    baseline_loss: float
    n_unmatched: int


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def detect_markers(rect: np.ndarray, band_px: int = 8, drop: float = 0.12,
                   min_area: int = 6, max_area: int = 240) -> np.ndarray:
    """Subpixel centers of dark marker disks, ordered by (row, col).

    Markers are local dark spots against the median-filtered background.
    Rows of the encoder band are excluded.
    """
    img = np.asarray(rect)
    gray = img.mean(axis=-1) if img.ndim == 3 else img.astype(float)
    if img.dtype != np.uint8:
        gray = gray * 255.0
    gray8 = np.clip(gray, 0, 255).astype(np.uint8)
    background = cv2.medianBlur(gray8, 11).astype(float)
    mask = (gray < background * (1.0 - drop)) & (background > 30.0)
    mask[:band_px + 2] = False
    mask[-2:] = False
    mask[:, :2] = False
    mask[:, -2:] = False
    n_labels, labels = cv2.connectedComponents(mask.astype(np.uint8),
                                               connectivity=8)
    if n_labels <= 1:
        return np.zeros((0, 2))
    weight = np.where(mask, np.maximum(background - gray, 1e-6), 0.0)
    flat = labels.ravel()
    w = weight.ravel()
    rows, cols = np.indices(labels.shape)
    areas = np.bincount(flat, minlength=n_labels)
    totals = np.bincount(flat, weights=w, minlength=n_labels)
    sum_r = np.bincount(flat, weights=w * rows.ravel(), minlength=n_labels)
    sum_c = np.bincount(flat, weights=w * cols.ravel(), minlength=n_labels)
    keep = (areas >= min_area) & (areas <= max_area) & (totals > 0)
    keep[0] = False
    if not keep.any():
        return np.zeros((0, 2))
    out = np.column_stack([sum_r[keep] / totals[keep],
                           sum_c[keep] / totals[keep]])
    return out[np.lexsort((out[:, 1], out[:, 0]))]


def marker_mask(shape: tuple[int, int], centers: np.ndarray,
                radius_px: float) -> np.ndarray:
    """Boolean disk mask around marker centers, padded for anti-aliasing."""
    mask = np.zeros(shape, dtype=np.uint8)
    r = int(np.ceil(radius_px + 1.5))
    for row, col in np.asarray(centers).reshape(-1, 2):
        cv2.circle(mask, (int(round(col)), int(round(row))), r, 1, -1)
    return mask.astype(bool)


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _sample_assignments(choice: np.ndarray, uni: np.ndarray,
                        p_match: np.ndarray, cand_mask: np.ndarray,
                        p_none: float) -> None:
    """Draw matched-once assignments into `choice`, one row per sample lane.

    Markers are matched sequentially, but only markers sharing a candidate
    detection actually compete.  Coloring the contention graph lets each
    color class draw in one vectorized pass against the running
    availability, which yields the same joint distribution as a per-marker
    sequential sweep in color order.
    """
    lanes, n_ref = choice.shape
    n_cur = p_match.shape[1]
    widths = cand_mask.sum(axis=1)
    k_max = max(int(widths.max()), 1)
    pad_cols = np.zeros((n_ref, k_max), dtype=int)
    pad_p = np.zeros((n_ref, k_max))
    for i in range(n_ref):
        cols = np.nonzero(cand_mask[i])[0]
        pad_cols[i, :len(cols)] = cols
        pad_p[i, :len(cols)] = p_match[i, cols]

    overlap = (cand_mask.astype(np.float32)
               @ cand_mask.astype(np.float32).T) > 0
    np.fill_diagonal(overlap, False)
    colors = np.full(n_ref, -1, dtype=int)
    neighbor_lists = [np.nonzero(overlap[i])[0] for i in range(n_ref)]
    for i in range(n_ref):
        used = {colors[j] for j in neighbor_lists[i] if colors[j] >= 0}
        c = 0
        while c in used:
            c += 1
        colors[i] = c

    avail = np.ones((lanes, n_cur), dtype=bool)
    for c in range(int(colors.max()) + 1):
        wave = np.nonzero((colors == c) & (widths > 0))[0]
        if len(wave) == 0:
            continue
        wc = pad_cols[wave]                       # (W, K)
        p = pad_p[wave][None] * avail[:, wc]      # (lanes, W, K)
        cs = np.cumsum(p, axis=2)
        u = uni[wave].T * (cs[:, :, -1] + p_none)
        idx = (cs < u[:, :, None]).sum(axis=2)
        hit = idx < widths[wave][None, :]
        col = wc[np.arange(len(wave))[None, :], np.minimum(idx, k_max - 1)]
        choice[:, wave] = np.where(hit, col, -1)
        ll, ww = np.nonzero(hit)
        avail[ll, col[ll, ww]] = False


def _greedy_nearest(dist: np.ndarray, accept_radius: float) -> np.ndarray:
    n_ref, n_cur = dist.shape
    assignment = np.full(n_ref, -1, dtype=int)
    taken = np.zeros(n_cur, dtype=bool)
    for i in range(n_ref):
        d = np.where(taken, np.inf, dist[i])
        j = int(np.argmin(d)) if n_cur else -1
        if n_cur and d[j] <= accept_radius:
            assignment[i] = j
            taken[j] = True
    return assignment


def _fill_unmatched(disp: np.ndarray, matched: np.ndarray,
                    adjacency: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Displacements for unmatched markers: matched-neighbor sum over the
    full neighborhood size."""
    if matched.all():
        return disp
    md = disp * matched[..., None]
    numer = np.matmul(adjacency, md)
    interp = numer / np.maximum(counts, 1.0)[None, :, None]
    return np.where(matched[..., None], disp, interp)


def _sample_losses(disp_full, matched, adjacency):
    pairs_i, pairs_n = np.nonzero(adjacency)
    d = disp_full[:, pairs_i] - disp_full[:, pairs_n]
    return np.hypot(d[..., 0], d[..., 1]).sum(axis=1)


def track_markers(ref: np.ndarray, cur: np.ndarray,
                  params: TrackParams = TrackParams(),
                  rng: np.random.Generator | None = None) -> MarkerMatch:
    """Match reference markers to current detections, at most one each."""
    ref = np.asarray(ref, dtype=float).reshape(-1, 2)
    cur = np.asarray(cur, dtype=float).reshape(-1, 2)
    if rng is None:
        rng = np.random.default_rng(0)
    n_ref, n_cur = len(ref), len(cur)
    if n_ref == 0:
        return MarkerMatch(np.zeros(0, dtype=int), np.zeros((0, 2)), 0.0,
                           0.0, 0)

    adjacency = (cdist(ref, ref) <= params.neighbor_radius_px).astype(float)
    np.fill_diagonal(adjacency, 0.0)
    counts = adjacency.sum(axis=1)

    dist = cdist(ref, cur) if n_cur else np.zeros((n_ref, 0))
    p_match = 1.0 - _sigmoid(params.sigmoid_slope
                             * (dist - params.match_radius_px))
    p_none = 1.0 - _sigmoid(params.sigmoid_slope * params.match_radius_px)

    lanes = params.n_samples
    choice = np.full((lanes, n_ref), -1, dtype=int)
    uni = rng.random((n_ref, lanes))
    if n_cur:
        # Candidates with match probability far below the no-match floor
        # can never meaningfully win a draw; dropping them keeps each row a
        # handful of columns wide and makes most markers uncontested.
        cand_mask = p_match > 1e-3 * p_none
        _sample_assignments(choice, uni, p_match, cand_mask, p_none)
    choice[0] = _greedy_nearest(dist, 2.0 * params.match_radius_px)

    matched = choice >= 0
    disp = np.zeros((lanes, n_ref, 2))
    if n_cur:
        safe = np.where(matched, choice, 0)
        disp = cur[safe] - ref[None, :, :]
        disp[~matched] = 0.0
    disp_full = _fill_unmatched(disp, matched, adjacency, counts)
    losses = _sample_losses(disp_full, matched, adjacency) \
        + params.mismatch_penalty * (~matched).sum(axis=1)
    best = int(np.argmin(losses))
    return MarkerMatch(assignment=choice[best],
                       displacements=disp_full[best],
                       loss=float(losses[best]),
                       baseline_loss=float(losses[0]),
                       n_unmatched=int((~matched[best]).sum()))


def assignment_loss(ref: np.ndarray, cur: np.ndarray, assignment: np.ndarray,
                    params: TrackParams = TrackParams()) -> float:
    """Loss of one explicit assignment; shares the tracker's scoring."""
    assignment = np.asarray(assignment, dtype=int)
    adjacency = (cdist(ref, ref) <= params.neighbor_radius_px).astype(float)
    np.fill_diagonal(adjacency, 0.0)
    counts = adjacency.sum(axis=1)
    matched = assignment >= 0
    disp = np.zeros((1, len(ref), 2))
    if matched.any():
        disp[0, matched] = cur[assignment[matched]] - ref[matched]
    disp_full = _fill_unmatched(disp, matched[None, :], adjacency, counts)
    loss = _sample_losses(disp_full, matched[None, :], adjacency)[0]
    return float(loss + params.mismatch_penalty * (~matched).sum())
