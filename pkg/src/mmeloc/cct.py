"""Cross-modal consistency filtering and drone extraction.

Radar points are gated against rays through event bounding boxes, then each
surviving box is tested for the propeller micro-motion signature: bins with
many balanced-polarity events, grouped into blobs laid out with a mirror
symmetry.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DegenerateFit, StaleTrack
from .events import EventFrontEnd, FilterParams, GridParams, TrackerParams, event_center_measurement
from .geometry import CameraIntrinsics, Pixel, Ray, RigidTransform, backproject_ray, point_ray_distance
from .radar import ChirpConfig, RadarMeasurement, RadarTracker
from .sim import LABEL_DRONE, EventArray


@dataclass(frozen=True)
class CCTParams:
    gate: float = 0.5  # g_r, m
    bin_size: int = 5  # px
    N_min: int = 20
    beta: float = 0.15
    s_min: float = 0.8
    window: int = 10_000  # delta_i, us
    min_cluster_bins: int = 5
    min_spread: float = 0.25  # minor/major eigenvalue ratio of the blob layout
    arm_count: int = 4

    def __post_init__(self):
        if self.gate <= 0 or self.bin_size < 1 or self.window <= 0 or self.N_min < 0:
            raise ValueError("gate, bin_size and window must be positive, N_min non-negative")
        if not (0 <= self.beta <= 0.5 and 0 <= self.s_min <= 1):
            raise ValueError("beta must lie in [0, 0.5] and s_min in [0, 1]")
        if self.arm_count < 1 or self.min_cluster_bins < 1:
            raise ValueError("arm_count and min_cluster_bins must be at least 1")


@dataclass
class AlignedDetection:
    track_id: int
    bbox: tuple
    ray: Ray
    radar_point: RadarMeasurement
    residual: float
    t: int
    event_count: int = 0


@dataclass
class MicroMotionHistogram:
    bin_size: int
    origin: tuple  # pixel of bin (0, 0)
    counts: np.ndarray  # (rows, cols)
    positive_fraction: np.ndarray  # nan where count == 0
    window: tuple


@dataclass
class Ellipse:
    center: np.ndarray  # px
    axes: np.ndarray  # semi-axes, px (major first)
    orientation: float  # rad, major axis angle
    n_bins: int


@dataclass
class DroneSignature:
    selected_bins: list
    clusters: list
    symmetry_score: float
    is_drone: bool
    skipped: int = 0  # clusters too small to fit


@dataclass
class DroneBundle:
    t: int
    x: Pixel
    D: float
    direction: np.ndarray
    P_E: np.ndarray
    U_E: Optional[np.ndarray]
    track_id: int
    bbox: tuple
    radar_index: int
    n_bins: int


# ----------------------------------------------------------------------------
# alignment


def align(detections, radar_points, K: CameraIntrinsics, extrinsics: RigidTransform = None,
          gate: float = 0.5, t: int = 0) -> list:
    """Match each box to the closest radar point along its center ray.

    Matching is closest-first over all (box, point) pairs so a point is used at
    most once; boxes with nothing inside the gate are dropped.
    """
    pairs = []
    rays = {}
    for d in detections:
        try:
            c = event_center_measurement(d, K)
        except StaleTrack:
            continue
        ray = backproject_ray(K, c)
        rays[d.id] = (d, ray)
        for j, m in enumerate(radar_points):
            r = point_ray_distance(ray, m.P_E)
            if r <= gate:
                pairs.append((r, d.id, j))
    pairs.sort()
    used_d, used_p = set(), set()
    out = []
    for r, did, j in pairs:
        if did in used_d or j in used_p:
            continue
        used_d.add(did)
        used_p.add(j)
        d, ray = rays[did]
        out.append(AlignedDetection(did, d.bbox, ray, radar_points[j], r, t, getattr(d, "event_count", 0)))
    out.sort(key=lambda a: a.track_id)
    return out


# ----------------------------------------------------------------------------
# micro-motion


def micro_motion_histogram(events, bbox, bin_size: int = 5, window: tuple = (0, 0)) -> MicroMotionHistogram:
    x0, y0 = int(np.floor(bbox[0])), int(np.floor(bbox[1]))
    x1, y1 = int(np.ceil(bbox[2])), int(np.ceil(bbox[3]))
    cols = (x1 - x0) // bin_size + 1
    rows = (y1 - y0) // bin_size + 1
    inside = (events.x >= x0) & (events.x <= x1) & (events.y >= y0) & (events.y <= y1)
    bx = (events.x[inside] - x0) // bin_size
    by = (events.y[inside] - y0) // bin_size
    idx = by * cols + bx
    counts = np.bincount(idx, minlength=rows * cols).reshape(rows, cols)
    pos = np.bincount(idx, weights=(events.p[inside] > 0), minlength=rows * cols).reshape(rows, cols)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(counts > 0, pos / np.maximum(counts, 1), np.nan)
    return MicroMotionHistogram(bin_size, (x0, y0), counts, frac, window)


def select_bins(h: MicroMotionHistogram, N_min: int = 20, beta: float = 0.15) -> np.ndarray:
    """Boolean bin mask: enough events and roughly balanced polarity."""
    with np.errstate(invalid="ignore"):
        return (h.counts >= N_min) & (np.abs(h.positive_fraction - 0.5) <= beta)


def micro_motion_score(events, bbox, bin_size: int = 5, N_min: int = 20, beta: float = 0.15,
                       window: tuple = (0, 0)) -> list:
    """Selected bins as (col, row) pairs relative to the box origin."""
    h = micro_motion_histogram(events, bbox, bin_size, window)
    r, c = np.nonzero(select_bins(h, N_min, beta))
    return list(zip(c.tolist(), r.tolist()))


# ----------------------------------------------------------------------------
# structure


def fit_ellipse(points: np.ndarray, min_points: int = 5) -> Ellipse:
    """Second-moment ellipse of a point set (bin centers)."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < min_points:
        raise DegenerateFit(f"{len(pts)} bins, need {min_points}")
    c = pts.mean(axis=0)
    Q = pts - c
    C = Q.T @ Q / len(pts)
    w, V = np.linalg.eigh(C)
    w = np.maximum(w[::-1], 0.0)
    major = V[:, 1]
    return Ellipse(c, 2.0 * np.sqrt(w), float(np.arctan2(major[1], major[0])), len(pts))


_AXES = np.deg2rad(np.arange(0, 180, 2))


def mirror_symmetry(centers) -> float:
    """Best mirror-axis consistency of a point set, 1 for a perfect mirror image.

    Axes pass through the centroid every 2 degrees. For each axis every point is
    reflected and matched to its nearest original; the summed mismatch is
    normalized by the set's mean radius.
    """
    P = np.asarray(centers, dtype=float)
    if len(P) < 2:
        return 1.0 if len(P) == 1 else 0.0
    m = P.mean(axis=0)
    Q = P - m
    scale = np.linalg.norm(Q, axis=1).mean()
    if scale < 1e-12:
        return 1.0
    c2, s2 = np.cos(2 * _AXES), np.sin(2 * _AXES)
    # reflection across a line at angle a: [[cos2a, sin2a], [sin2a, -cos2a]]
    rx = c2[:, None] * Q[None, :, 0] + s2[:, None] * Q[None, :, 1]
    ry = s2[:, None] * Q[None, :, 0] - c2[:, None] * Q[None, :, 1]
    d = np.hypot(rx[:, :, None] - Q[None, None, :, 0], ry[:, :, None] - Q[None, None, :, 1])
    cost = d.min(axis=2).sum(axis=1) / (len(P) * scale)
    return float(np.clip(1.0 - cost.min(), 0.0, 1.0))


def layout_spread(centers) -> float:
    P = np.asarray(centers, dtype=float)
    if len(P) < 3:
        return 0.0
    Q = P - P.mean(axis=0)
    w = np.linalg.eigvalsh(Q.T @ Q / len(P))
    return float(w[0] / w[1]) if w[1] > 0 else 0.0


def structure_symmetry_check(selected_bins, arm_count: int = 4, s_min: float = 0.8,
                             min_cluster_bins: int = 5, min_spread: float = 0.25) -> DroneSignature:
    bins = list(selected_bins)
    if not bins:
        return DroneSignature([], [], 0.0, False)
    b = np.asarray(bins, dtype=int)
    grid = np.zeros((b[:, 1].max() + 1, b[:, 0].max() + 1), dtype=bool)
    grid[b[:, 1], b[:, 0]] = True
    lab, n = ndimage.label(grid, structure=ndimage.generate_binary_structure(2, 1))
    ellipses, skipped = [], 0
    r, c = np.nonzero(lab)
    k = lab[r, c]
    o = np.argsort(k, kind="stable")
    pts = np.column_stack([c[o], r[o]]) + 0.5
    for part in np.split(pts, np.searchsorted(k[o], np.arange(2, n + 1))):
        try:
            ellipses.append(fit_ellipse(part, min_cluster_bins))
        except DegenerateFit:
            skipped += 1
    centers = [e.center for e in ellipses]
    score = mirror_symmetry(centers) if centers else 0.0
    count_ok = abs(len(ellipses) - arm_count) <= 1
    is_drone = bool(count_ok and score >= s_min and layout_spread(centers) >= min_spread)
    return DroneSignature(bins, ellipses, score, is_drone, skipped)


def extract_drone(aligned: list, signatures: list) -> Optional[tuple]:
    """Pick the qualifying detection with the most propeller bins.

    Ties go to the larger event count, then the lower track id. Returns the
    (AlignedDetection, DroneSignature) pair or None.
    """
    best = None
    for a, s in zip(aligned, signatures):
        if not s.is_drone:
            continue
        key = (-len(s.selected_bins), -a.event_count, a.track_id)
        if best is None or key < best[0]:
            best = (key, a, s)
    return None if best is None else (best[1], best[2])


# ----------------------------------------------------------------------------
# per-frame stage


@dataclass
class FrameResult:
    t: int
    bundle: Optional[DroneBundle]
    detections: list  # confirmed tracks updated this frame
    aligned: list
    signatures: list
    radar: list  # RadarMeasurement list
    latency_us: float = 0.0


class CCTStage:
    """Runs event tracking, radar measurement, alignment and extraction per radar frame."""

    def __init__(self, K: CameraIntrinsics, extrinsics: RigidTransform, params: CCTParams = CCTParams(),
                 fparams: FilterParams = FilterParams(), grid: GridParams = GridParams(),
                 tparams: TrackerParams = TrackerParams(), chirp: Optional[ChirpConfig] = None,
                 merge_ratio: float = 1.0):
        self.K, self.extrinsics, self.params = K, extrinsics, params
        self.front = EventFrontEnd(K.width, K.height, fparams, grid, tparams, merge_ratio)
        self.radar = RadarTracker(extrinsics, chirp)
        self._retained = EventArray.empty()
        self._keep = max(grid.c_dt, params.window)
        self._had_point = False
        self.retained_mask_parts: list = []

    def push_events(self, chunk) -> None:
        """Filter a time-ordered chunk and append the retained events."""
        m = self.front.filter(chunk)
        self.retained_mask_parts.append(m)
        kept = chunk.take(m)
        if len(kept):
            t_cut = int(kept.t[-1]) - self._keep - 1
            old = self._retained.window(t_cut, np.iinfo(np.int64).max)
            self._retained = EventArray.concat([old, kept])

    def process(self, frame) -> FrameResult:
        t0 = time.perf_counter()
        p = self.params
        _, detections = self.front.frame(self._retained, frame.t)
        meas = self.radar.measure(frame)
        aligned = align(detections, meas, self.K, self.extrinsics, p.gate, frame.t)
        win = self._retained.window(frame.t - p.window, frame.t)
        sigs = []
        for a in aligned:
            bins = micro_motion_score(win, a.bbox, p.bin_size, p.N_min, p.beta, (frame.t - p.window, frame.t))
            sigs.append(structure_symmetry_check(bins, p.arm_count, p.s_min, p.min_cluster_bins, p.min_spread))
        pick = extract_drone(aligned, sigs)
        bundle = None
        if pick is None:
            self.radar.associate(None)
        else:
            a, s = pick
            m = self.radar.associate(a.radar_point, consecutive=self._had_point)
            det = next(d for d in detections if d.id == a.track_id)
            bundle = DroneBundle(frame.t, event_center_measurement(det, self.K), m.D, m.direction, m.P_E,
                                 None if m.U_E is None else m.U_E.copy(), a.track_id, a.bbox, m.index,
                                 len(s.selected_bins))
        self._had_point = bundle is not None
        return FrameResult(frame.t, bundle, detections, aligned, sigs, meas,
                           (time.perf_counter() - t0) * 1e6)


def run_cct(events, frames, K, extrinsics, **kw) -> tuple[list, np.ndarray]:
    """Whole-stream convenience: per-frame results and the retained-event mask."""
    st = CCTStage(K, extrinsics, **kw)
    out = []
    i0 = 0
    for fr in frames:
        i1 = int(np.searchsorted(events.t, fr.t, side="left"))
        st.push_events(events.take(slice(i0, i1)))
        i0 = i1
        out.append(st.process(fr))
    st.push_events(events.take(slice(i0, len(events))))
    mask = np.concatenate(st.retained_mask_parts) if st.retained_mask_parts else np.zeros(0, bool)
    return out, mask


# ----------------------------------------------------------------------------
# labelled metrics


def _project_truth(K, p):
    return K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy


def filtering_metrics(results: list, frames: list, truth, K: CameraIntrinsics) -> dict:
    """Measurement-level recall/precision per modality.

    Radar: the point picked for the drone bundle is correct when its label is
    "drone". Event: the kept box is correct when it contains the projected true
    drone position.
    """
    by_t = {fr.t: fr for fr in frames}
    r_tp = r_sel = e_tp = e_sel = 0
    r_pos = e_pos = 0
    for res in results:
        fr = by_t[res.t]
        has_drone = any(p.label == "drone" for p in fr.points)
        r_pos += has_drone
        p = truth.interpolate([res.t])[0]
        u, v = _project_truth(K, p)
        visible = 0 <= u < K.width and 0 <= v < K.height
        e_pos += visible
        b = res.bundle
        if b is None:
            continue
        r_sel += 1
        r_tp += fr.points[b.radar_index].label == "drone"
        e_sel += 1
        e_tp += b.bbox[0] <= u <= b.bbox[2] and b.bbox[1] <= v <= b.bbox[3]
    div = lambda a, c: a / c if c else 0.0
    return {"radar_recall": div(r_tp, r_pos), "radar_precision": div(r_tp, r_sel),
            "event_recall": div(e_tp, e_pos), "event_precision": div(e_tp, e_sel)}


def event_filter_metrics(labels: np.ndarray, retained: np.ndarray) -> dict:
    d = labels == LABEL_DRONE
    tp = int((retained & d).sum())
    return {"recall": tp / max(int(d.sum()), 1), "precision": tp / max(int(retained.sum()), 1)}
