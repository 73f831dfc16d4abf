"""Event stream front end: SAE filtering, grid clustering and Kalman/IoU tracking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy import ndimage

from .errors import StaleTrack
from .geometry import CameraIntrinsics, Pixel, undistort

NEVER = np.iinfo(np.int64).min // 4  # "no event yet" timestamp


@dataclass(frozen=True)
class FilterParams:
    T_n: int = 2000  # us, neighbour similarity
    T_k: int = 1000  # us, SAE retention window

    def __post_init__(self):
        if self.T_n <= 0 or self.T_k <= 0:
            raise ValueError("T_n and T_k must be positive")


@dataclass(frozen=True)
class GridParams:
    c_w: int = 8
    c_h: int = 8
    c_dt: int = 10_000  # us
    c_thres: int = 10

    def __post_init__(self):
        if min(self.c_w, self.c_h, self.c_dt, self.c_thres) <= 0:
            raise ValueError("grid parameters must be positive")


class SAE:
    """Per-pixel, per-polarity (t_l, t_r). Index 0 is positive, 1 negative."""

    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.t_l = np.full((2, height, width), NEVER, dtype=np.int64)
        self.t_r = np.full((2, height, width), NEVER, dtype=np.int64)

    def copy(self) -> "SAE":
        s = SAE(self.width, self.height)
        s.t_l[:] = self.t_l
        s.t_r[:] = self.t_r
        return s


def _pol_index(p) -> int:
    return 0 if p > 0 else 1


# ----------------------------------------------------------------------------
# per-event reference implementation


def similarity_filter(e, sae: SAE, p: FilterParams) -> bool:
    """True iff some 8-neighbour saw an event (either polarity) less than T_n ago."""
    x, y, t = int(e[0]), int(e[1]), int(e[2])
    best = None
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            nx, ny = x + dx, y + dy
            if 0 <= nx < sae.width and 0 <= ny < sae.height:
                tl = max(sae.t_l[0, ny, nx], sae.t_l[1, ny, nx])
                if tl != NEVER and (best is None or t - tl < best):
                    best = t - tl
    return best is not None and best < p.T_n


def sae_update(sae: SAE, e, p: FilterParams, kept: bool = True) -> bool:
    """Record the event; return whether it is retained.

    t_l always moves. The event is retained (and t_r moves) only when the
    previous event at the pixel is older than T_k or had the other polarity.
    Events rejected by the similarity filter still refresh t_l so that they
    can support their neighbours.
    """
    x, y, t, pol = int(e[0]), int(e[1]), int(e[2]), int(e[3])
    k = _pol_index(pol)
    prev_same, prev_other = sae.t_l[k, y, x], sae.t_l[1 - k, y, x]
    sae.t_l[k, y, x] = t
    if not kept:
        return False
    if prev_same == NEVER or prev_other > prev_same or t - prev_same > p.T_k:
        sae.t_r[k, y, x] = t
        return True
    return False


def filter_events_reference(events, sae: SAE, p: FilterParams) -> np.ndarray:
    out = np.zeros(len(events), dtype=bool)
    for i in range(len(events)):
        e = (events.x[i], events.y[i], events.t[i], events.p[i])
        kept = similarity_filter(e, sae, p)
        out[i] = sae_update(sae, e, p, kept)
    return out


# ----------------------------------------------------------------------------
# compiled stream kernel, same semantics as the reference above


@numba.njit(cache=True)
def _filter_kernel(t, x, y, pol, t_l, t_r, T_n, T_k, never):
    n = t.shape[0]
    H, W = t_l.shape[1], t_l.shape[2]
    out = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        xi, yi, ti = x[i], y[i], t[i]
        best = -1
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                if dx == 0 and dy == 0:
                    continue
                nx, ny = xi + dx, yi + dy
                if nx < 0 or ny < 0 or nx >= W or ny >= H:
                    continue
                tl = max(t_l[0, ny, nx], t_l[1, ny, nx])
                if tl != never:
                    d = ti - tl
                    if best < 0 or d < best:
                        best = d
        kept = best >= 0 and best < T_n
        k = 0 if pol[i] > 0 else 1
        ps = t_l[k, yi, xi]
        po = t_l[1 - k, yi, xi]
        t_l[k, yi, xi] = ti
        if kept and (ps == never or po > ps or ti - ps > T_k):
            t_r[k, yi, xi] = ti
            out[i] = True
    return out


def filter_events(events, sae: SAE, p: FilterParams) -> np.ndarray:
    """Retained mask for a time-ordered chunk; SAE state carries across chunks."""
    if len(events) == 0:
        return np.zeros(0, dtype=bool)
    return _filter_kernel(np.ascontiguousarray(events.t, dtype=np.int64),
                          np.ascontiguousarray(events.x, dtype=np.int64),
                          np.ascontiguousarray(events.y, dtype=np.int64),
                          np.ascontiguousarray(events.p, dtype=np.int64),
                          sae.t_l, sae.t_r, int(p.T_n), int(p.T_k), NEVER)


# ----------------------------------------------------------------------------
# clustering


@dataclass
class Cluster:
    bbox: tuple  # (x_min, y_min, x_max, y_max), inclusive pixels
    event_count: int
    t: int
    member_cells: list = field(default_factory=list)

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.bbox[0] + self.bbox[2]) / 2, (self.bbox[1] + self.bbox[3]) / 2])


def cell_counts(x, y, g: GridParams, width: int, height: int) -> np.ndarray:
    nx = -(-width // g.c_w)
    ny = -(-height // g.c_h)
    idx = (np.asarray(y) // g.c_h) * nx + np.asarray(x) // g.c_w
    return np.bincount(idx, minlength=nx * ny).reshape(ny, nx)


_FOUR = ndimage.generate_binary_structure(2, 1)


def cluster_active_cells(events, g: GridParams, width: int, height: int, t: Optional[int] = None) -> list:
    """Cells with more than c_thres events, 4-connected into clusters."""
    if len(events) == 0:
        return []
    counts = cell_counts(events.x, events.y, g, width, height)
    active = counts > g.c_thres
    lab, n = ndimage.label(active, structure=_FOUR)
    if n == 0:
        return []
    t = int(events.t[-1]) if t is None else int(t)
    out = []
    for k, sl in enumerate(ndimage.find_objects(lab), start=1):
        cy, cx = np.nonzero(lab[sl] == k)
        cy = cy + sl[0].start
        cx = cx + sl[1].start
        bbox = (int(cx.min() * g.c_w), int(cy.min() * g.c_h),
                int(min((cx.max() + 1) * g.c_w, width) - 1), int(min((cy.max() + 1) * g.c_h, height) - 1))
        out.append(Cluster(bbox, int(counts[cy, cx].sum()), t, list(zip(cx.tolist(), cy.tolist()))))
    return out


def _gap(a, b) -> float:
    dx = max(a[0] - b[2], b[0] - a[2], 0) - 1
    dy = max(a[1] - b[3], b[1] - a[3], 0) - 1
    return max(dx, dy, 0)


def merge_nearby_clusters(clusters: list, ratio: float = 1.0) -> list:
    """Union clusters whose gap is within `ratio` times the larger bbox side.

    Separate propeller disks of one airframe come out of the grid as separate
    clusters; this groups them into a single object proposal.
    """
    n = len(clusters)
    if n < 2 or ratio <= 0:
        return list(clusters)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    side = [max(c.bbox[2] - c.bbox[0], c.bbox[3] - c.bbox[1]) + 1 for c in clusters]
    for i in range(n):
        for j in range(i + 1, n):
            if _gap(clusters[i].bbox, clusters[j].bbox) <= ratio * max(side[i], side[j]):
                a, b = find(i), find(j)
                if a != b:
                    parent[max(a, b)] = min(a, b)
    groups: dict = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(clusters[i])
    out = []
    for root in sorted(groups):
        cs = groups[root]
        bb = (min(c.bbox[0] for c in cs), min(c.bbox[1] for c in cs),
              max(c.bbox[2] for c in cs), max(c.bbox[3] for c in cs))
        out.append(Cluster(bb, sum(c.event_count for c in cs), cs[0].t,
                           [m for c in cs for m in c.member_cells]))
    return out


# ----------------------------------------------------------------------------
# tracking


def iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0]) + 1
    ih = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area = lambda r: (r[2] - r[0] + 1) * (r[3] - r[1] + 1)
    return inter / (area(a) + area(b) - inter)


def _recenter(bbox, c) -> tuple:
    hw = (bbox[2] - bbox[0]) / 2
    hh = (bbox[3] - bbox[1]) / 2
    return (c[0] - hw, c[1] - hh, c[0] + hw, c[1] + hh)


@dataclass
class TrackState:
    id: int
    state: np.ndarray  # u, v, du, dv
    covariance: np.ndarray
    bbox: tuple
    last_update: int
    age: int = 1
    misses: int = 0
    hits: int = 1
    updated: bool = True  # corrected at the most recent step
    event_count: int = 0

    @property
    def center(self) -> np.ndarray:
        return self.state[:2].copy()

    @property
    def confirmed(self) -> bool:
        return self.hits >= 2


@dataclass(frozen=True)
class TrackerParams:
    M_max: int = 5
    sigma_a: float = 500.0  # px/s^2, white-acceleration process noise
    sigma_meas: float = 4.0  # px, bbox-center noise (c_w / 2)
    sigma_v0: float = 300.0  # px/s, initial velocity spread
    iou_min: float = 0.05


class Tracker:
    """Constant-velocity Kalman tracks with greedy IoU association."""

    def __init__(self, params: TrackerParams = TrackerParams()):
        self.params = params
        self.tracks: list[TrackState] = []
        self._next_id = 0

    def _predict(self, tr: TrackState, t: int) -> None:
        dt = (t - tr.last_update) * 1e-6
        if dt <= 0:
            return
        F = np.eye(4)
        F[0, 2] = F[1, 3] = dt
        q = self.params.sigma_a ** 2
        Q1 = q * np.array([[dt ** 4 / 4, dt ** 3 / 2], [dt ** 3 / 2, dt ** 2]])
        Q = np.zeros((4, 4))
        Q[np.ix_([0, 2], [0, 2])] = Q1
        Q[np.ix_([1, 3], [1, 3])] = Q1
        tr.state = F @ tr.state
        P = F @ tr.covariance @ F.T + Q
        tr.covariance = 0.5 * (P + P.T)
        tr.bbox = _recenter(tr.bbox, tr.state[:2])
        tr.last_update = t

    def _correct(self, tr: TrackState, z) -> None:
        H = np.zeros((2, 4))
        H[0, 0] = H[1, 1] = 1.0
        R = self.params.sigma_meas ** 2 * np.eye(2)
        P = tr.covariance
        S = H @ P @ H.T + R
        Kg = np.linalg.solve(S, H @ P).T
        tr.state = tr.state + Kg @ (np.asarray(z, dtype=float) - H @ tr.state)
        # Joseph form keeps P symmetric PSD
        I_KH = np.eye(4) - Kg @ H
        P = I_KH @ P @ I_KH.T + Kg @ R @ Kg.T
        tr.covariance = 0.5 * (P + P.T)

    def step(self, clusters: list, t: int) -> tuple[list, list]:
        """Predict, associate, correct, spawn, prune. Returns (tracks, detections)."""
        for tr in self.tracks:
            self._predict(tr, t)
            tr.updated = False
            tr.age += 1
        pairs = []
        for ti, tr in enumerate(self.tracks):
            for ci, c in enumerate(clusters):
                v = iou(tr.bbox, c.bbox)
                if v > self.params.iou_min:
                    pairs.append((-v, tr.id, ci, ti))
        pairs.sort()
        used_t, used_c = set(), set()
        for _, _, ci, ti in pairs:
            if ti in used_t or ci in used_c:
                continue
            used_t.add(ti)
            used_c.add(ci)
            tr, c = self.tracks[ti], clusters[ci]
            self._correct(tr, c.center)
            tr.bbox = _recenter(c.bbox, tr.state[:2])
            tr.misses = 0
            tr.hits += 1
            tr.updated = True
            tr.event_count = c.event_count
        for ti, tr in enumerate(self.tracks):
            if ti not in used_t:
                tr.misses += 1
        self.tracks = [tr for tr in self.tracks if tr.misses <= self.params.M_max]
        p = self.params
        for ci, c in enumerate(clusters):
            if ci in used_c:
                continue
            P0 = np.diag([p.sigma_meas ** 2, p.sigma_meas ** 2, p.sigma_v0 ** 2, p.sigma_v0 ** 2])
            self.tracks.append(TrackState(self._next_id, np.r_[c.center, 0.0, 0.0], P0,
                                          tuple(float(b) for b in c.bbox), int(t),
                                          event_count=c.event_count))
            self._next_id += 1
        detections = [tr for tr in self.tracks if tr.updated and tr.confirmed]
        return self.tracks, detections


def track_step(tracker: Tracker, clusters: list, t: int):
    return tracker.step(clusters, t)


def event_center_measurement(track: TrackState, K: CameraIntrinsics) -> Pixel:
    if not track.updated:
        raise StaleTrack(f"track {track.id} coasted this step")
    b = track.bbox
    return undistort(K, ((b[0] + b[2]) / 2, (b[1] + b[3]) / 2))


# ----------------------------------------------------------------------------
# front end wrapper


class EventFrontEnd:
    """Streaming filter plus per-frame clustering and tracking."""

    def __init__(self, width: int, height: int, fparams: FilterParams = FilterParams(),
                 grid: GridParams = GridParams(), tparams: TrackerParams = TrackerParams(),
                 merge_ratio: float = 1.0):
        self.width, self.height = width, height
        self.fparams, self.grid, self.merge_ratio = fparams, grid, merge_ratio
        self.sae = SAE(width, height)
        self.tracker = Tracker(tparams)

    def filter(self, events) -> np.ndarray:
        return filter_events(events, self.sae, self.fparams)

    def frame(self, retained, t: int):
        """Cluster the retained events in [t - c_dt, t) and advance the tracker."""
        win = retained.window(t - self.grid.c_dt, t)
        clusters = merge_nearby_clusters(
            cluster_active_cells(win, self.grid, self.width, self.height, t), self.merge_ratio)
        return self.tracker.step(clusters, t)
