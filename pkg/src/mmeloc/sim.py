"""Deterministic synthetic scenarios: trajectory, event stream, radar frames, IMU.

Everything downstream is validated against these datasets, so every random
draw goes through one seeded generator tree.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Optional

import numba
import numpy as np
import pandas as pd

from .errors import DroneOutOfView, InvalidConfig, SchemaError
from .geometry import Calibration, CameraIntrinsics, RigidTransform, default_calibration, distort_many
from .radar import ChirpConfig

LABEL_DRONE = 1
LABEL_BACKGROUND = 0
TRAJECTORY_KINDS = ("descent", "square_spiral", "hover")


@dataclass
class ScenarioConfig:
    seed: int = 42
    duration: float = 2.0  # s
    trajectory_kind: str = "descent"

    # trajectory, camera frame E (camera on the ground looking up, z = height above it)
    start_position: tuple = (0.35, -0.25, 6.5)
    pad_position: tuple = (0.0, 0.0, 3.0)
    hover_position: tuple = (0.0, 0.0, 5.0)
    spiral_center: tuple = (0.0, 0.0)
    spiral_radius: tuple = (0.6, 0.2)  # start, end
    spiral_height: tuple = (6.0, 4.0)
    spiral_period: float = 2.0  # s per lap

    # airframe
    drone_arm_count: int = 4
    arm_length: float = 0.184  # hub distance from the body center
    propeller_radius: float = 0.07
    propeller_rate: float = 60.0  # rev/s
    blade_count: int = 2
    blade_width_rad: float = 0.15

    # event camera
    event_emit_prob: float = 0.5  # probability a blade crossing fires a pixel
    background_noise_rate: float = 5e4  # events/s over the whole sensor
    noise_positive_fraction: float = 0.95
    event_timestamp_resolution: int = 1  # us
    distractors: list = field(default_factory=list)

    # radar
    radar_frame_rate: float = 200.0
    radar_sigma_D: float = 0.04
    radar_sigma_theta: float = float(np.deg2rad(2.0))
    multipath_ghost_rate: float = 3.0
    ghost_shell: float = 2.0
    radar_fov: float = float(np.deg2rad(60.0))  # half-angle off boresight for ghosts
    raw_if: bool = False
    if_noise: float = 0.05
    chirp: dict = field(default_factory=dict)

    # imu
    imu_rate: float = 200.0
    imu_noise: float = 0.05  # m/s^2
    imu_bias: tuple = (0.0, 0.0, 0.0)

    calibration: Optional[dict] = None

    def validate(self) -> None:
        if not self.duration > 0:
            raise InvalidConfig("duration must be positive")
        if self.trajectory_kind not in TRAJECTORY_KINDS:
            raise InvalidConfig(f"unknown trajectory_kind {self.trajectory_kind!r}")
        if self.drone_arm_count not in (4, 6):
            raise InvalidConfig("drone_arm_count must be 4 or 6")
        if self.propeller_rate < 0:
            raise InvalidConfig("propeller_rate must be non-negative")
        if self.radar_frame_rate <= 0 or self.imu_rate <= 0:
            raise InvalidConfig("sensor rates must be positive")
        if self.event_timestamp_resolution < 1:
            raise InvalidConfig("event_timestamp_resolution must be >= 1 us")
        if min(self.radar_sigma_D, self.radar_sigma_theta, self.imu_noise, self.if_noise) < 0:
            raise InvalidConfig("noise levels must be non-negative")
        if not 0 <= self.event_emit_prob <= 1:
            raise InvalidConfig("event_emit_prob must be in [0, 1]")

    def calibration_obj(self) -> Calibration:
        return Calibration.from_dict(self.calibration) if self.calibration else default_calibration()

    def chirp_config(self) -> ChirpConfig:
        return ChirpConfig(**self.chirp)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["calibration"] is None:
            d["calibration"] = default_calibration().to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown scenario keys: {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) and k not in ("distractors",) else v) for k, v in d.items()}
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def replace(self, **kw) -> "ScenarioConfig":
        d = asdict(self)
        d.update(kw)
        return ScenarioConfig(**d)


def noiseless(cfg: ScenarioConfig) -> ScenarioConfig:
    """Same scenario with every stochastic corruption switched off."""
    return cfg.replace(background_noise_rate=0.0, radar_sigma_D=0.0, radar_sigma_theta=0.0,
                       multipath_ghost_rate=0.0, if_noise=0.0, imu_noise=0.0,
                       imu_bias=(0.0, 0.0, 0.0), distractors=[])


def _streams(seed: int):
    # independent streams so e.g. toggling ghosts leaves the event stream alone
    ss = np.random.SeedSequence(seed)
    return dict(zip(("events", "noise", "radar", "imu", "distractors"),
                    (np.random.default_rng(s) for s in ss.spawn(5))))


# ----------------------------------------------------------------------------
# trajectory


def _min_jerk(tau):
    s = tau ** 3 * (10 - 15 * tau + 6 * tau ** 2)
    ds = 30 * tau ** 2 * (1 - tau) ** 2
    dds = 60 * tau * (1 - tau) * (1 - 2 * tau)
    return s, ds, dds


def _tri(phi):
    # band-limited triangle wave and its first two derivatives
    k = np.arange(3)[:, None]
    n = 2 * k + 1
    sgn = (-1.0) ** k
    c = 8 / np.pi ** 2
    arg = n * phi[None, :]
    return (c * (sgn * np.sin(arg) / n ** 2).sum(0),
            c * (sgn * np.cos(arg) / n).sum(0),
            -c * (sgn * np.sin(arg)).sum(0))


def motion(cfg: ScenarioConfig, t_s) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic position, velocity, acceleration (each n x 3) at times in seconds."""
    t = np.atleast_1d(np.asarray(t_s, dtype=float))
    T = cfg.duration
    n = len(t)
    if cfg.trajectory_kind == "hover":
        p = np.tile(np.asarray(cfg.hover_position, dtype=float), (n, 1))
        return p, np.zeros((n, 3)), np.zeros((n, 3))
    if cfg.trajectory_kind == "descent":
        p0 = np.asarray(cfg.start_position, dtype=float)
        p1 = np.asarray(cfg.pad_position, dtype=float)
        s, ds, dds = _min_jerk(np.clip(t / T, 0.0, 1.0))
        d = p1 - p0
        return (p0 + s[:, None] * d, (ds / T)[:, None] * d, (dds / T ** 2)[:, None] * d)

    # square spiral: a diamond-shaped band-limited square, rotated 45 degrees
    r0, r1 = cfg.spiral_radius
    z0, z1 = cfg.spiral_height
    w = 2 * np.pi / cfg.spiral_period
    phi = w * t
    r = r0 + (r1 - r0) * t / T
    dr = (r1 - r0) / T
    a, da, dda = _tri(phi)
    b, db, ddb = _tri(phi + np.pi / 2)
    M = np.array([[1.0, -1.0], [1.0, 1.0]])  # rot45 * sqrt(2)
    q = M @ np.vstack([a, b])
    dq = M @ np.vstack([da, db]) * w
    ddq = M @ np.vstack([dda, ddb]) * w ** 2
    c = np.asarray(cfg.spiral_center, dtype=float)
    p = np.column_stack([c[0] + r * q[0], c[1] + r * q[1], z0 + (z1 - z0) * t / T])
    v = np.column_stack([dr * q[0] + r * dq[0], dr * q[1] + r * dq[1], np.full(n, (z1 - z0) / T)])
    acc = np.column_stack([2 * dr * dq[0] + r * ddq[0], 2 * dr * dq[1] + r * ddq[1], np.zeros(n)])
    return p, v, acc


@dataclass
class GroundTruthTrajectory:
    t: np.ndarray  # int64 us
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray

    def __len__(self):
        return len(self.t)

    def interpolate(self, t_us) -> np.ndarray:
        t_us = np.asarray(t_us, dtype=float)
        return np.column_stack([np.interp(t_us, self.t, self.position[:, k]) for k in range(3)])


def generate_trajectory(cfg: ScenarioConfig) -> GroundTruthTrajectory:
    cfg.validate()
    n = int(round(cfg.duration * 1000))
    t_us = np.arange(n + 1, dtype=np.int64) * 1000
    p, v, a = motion(cfg, t_us * 1e-6)
    return GroundTruthTrajectory(t_us, p, v, a)


# ----------------------------------------------------------------------------
# airframe


def hub_offsets(cfg: ScenarioConfig) -> np.ndarray:
    """Propeller hub offsets from the body center (k x 3); X layout for quads."""
    k = cfg.drone_arm_count
    start = np.pi / 4 if k == 4 else 0.0
    ang = start + 2 * np.pi * np.arange(k) / k
    return cfg.arm_length * np.column_stack([np.cos(ang), np.sin(ang), np.zeros(k)])


def _spin(k: int) -> np.ndarray:
    return np.where(np.arange(k) % 2 == 0, 1.0, -1.0)


# ----------------------------------------------------------------------------
# events


@dataclass
class EventArray:
    t: np.ndarray  # int64 us
    x: np.ndarray  # int32
    y: np.ndarray
    p: np.ndarray  # int8, +1 / -1
    label: np.ndarray  # int8, LABEL_DRONE / LABEL_BACKGROUND

    def __len__(self):
        return len(self.t)

    @classmethod
    def empty(cls) -> "EventArray":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int32), np.zeros(0, np.int32),
                   np.zeros(0, np.int8), np.zeros(0, np.int8))

    @classmethod
    def concat(cls, parts) -> "EventArray":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("t", "x", "y", "p", "label")))

    def take(self, idx) -> "EventArray":
        return EventArray(self.t[idx], self.x[idx], self.y[idx], self.p[idx], self.label[idx])

    def sorted(self) -> "EventArray":
        return self.take(np.argsort(self.t, kind="stable"))

    def window(self, t0: int, t1: int) -> "EventArray":
        """Events with t0 <= t < t1 (stream must be time-sorted)."""
        i0, i1 = np.searchsorted(self.t, [t0, t1], side="left")
        return self.take(slice(i0, i1))


def _to_events(t_s, u, v, pol, label, K: CameraIntrinsics, res: int) -> EventArray:
    if K.has_distortion:
        u, v = distort_many(K, u, v)
    x = np.rint(u)
    y = np.rint(v)
    ok = (x >= 0) & (x < K.width) & (y >= 0) & (y < K.height)
    t_us = (np.rint(t_s[ok] * 1e6 / res) * res).astype(np.int64)
    return EventArray(t_us, x[ok].astype(np.int32), y[ok].astype(np.int32),
                      np.asarray(pol)[ok].astype(np.int8),
                      np.full(int(ok.sum()), label, dtype=np.int8))


def visibility(traj: GroundTruthTrajectory, K: CameraIntrinsics) -> float:
    p = traj.position
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * p[:, 0] / z + K.cx
        v = K.fy * p[:, 1] / z + K.cy
    inside = (z > 0) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return float(inside.mean())


@numba.njit(cache=True)
def _disk_crossings(uc, vc, r_px, t0, R, omega_s, phase, sector, n_blades, dt, prob, seed):
    # omega_s carries the spin sign. During [t0, t0 + dt) each blade edge
    # sweeps a wedge narrower than pi; a cross-product test finds the swept
    # pixels before the exact crossing time is solved from the pixel angle.
    np.random.seed(seed)
    omega = abs(omega_s)
    sign = 1.0 if omega_s >= 0 else -1.0
    sweep = omega * dt
    cap = 1024
    ot = np.empty(cap)
    ou = np.empty(cap)
    ov = np.empty(cap)
    clo = np.empty(n_blades)
    slo = np.empty(n_blades)
    chi = np.empty(n_blades)
    shi = np.empty(n_blades)
    n = 0
    for s in range(len(t0)):
        bu = np.rint(uc[s])
        bv = np.rint(vc[s])
        r2 = r_px[s] * r_px[s]
        blade = omega_s * t0[s] + phase
        for k in range(n_blades):
            lo = blade + k * sector - (sweep if sign < 0 else 0.0)
            clo[k], slo[k] = np.cos(lo), np.sin(lo)
            chi[k], shi[k] = np.cos(lo + sweep), np.sin(lo + sweep)
        for j in range(-R, R + 1):
            for i in range(-R, R + 1):
                du = bu + i - uc[s]
                dv = bv + j - vc[s]
                if du * du + dv * dv > r2:
                    continue
                swept = False
                for k in range(n_blades):
                    if clo[k] * dv - slo[k] * du >= 0.0 and du * shi[k] - dv * chi[k] > 0.0:
                        swept = True
                        break
                if not swept:
                    continue
                wait = np.mod(sign * (np.arctan2(dv, du) - blade), sector) / omega
                if wait < dt and np.random.random() < prob:
                    if n == cap:
                        cap *= 2
                        ot2 = np.empty(cap)
                        ou2 = np.empty(cap)
                        ov2 = np.empty(cap)
                        ot2[:n] = ot
                        ou2[:n] = ou
                        ov2[:n] = ov
                        ot, ou, ov = ot2, ou2, ov2
                    ot[n] = t0[s] + wait
                    ou[n] = bu + i
                    ov[n] = bv + j
                    n += 1
    return ot[:n], ou[:n], ov[:n]


def _propeller_events(cfg: ScenarioConfig, K: CameraIntrinsics, rng) -> EventArray:
    """Blade-edge crossings on each projected propeller disk.

    The blade plane is parallel to the image plane, so each disk is a circle of
    radius f*r/Z around the projected hub. A pixel fires a (+, -) pair when a
    blade's leading and trailing edges pass over it, with probability
    event_emit_prob per crossing.
    """
    if cfg.propeller_rate <= 0 or cfg.event_emit_prob <= 0:
        return EventArray.empty()
    omega = 2 * np.pi * cfg.propeller_rate
    sector = 2 * np.pi / cfg.blade_count
    # each step's swept wedge must stay narrower than pi and than one sector
    dt = min(1e-3, 0.5 * min(sector, np.pi) / omega)
    n_steps = int(np.ceil(cfg.duration / dt))
    t0 = np.arange(n_steps) * dt
    trail = cfg.blade_width_rad / omega
    hubs = hub_offsets(cfg)
    spins = _spin(len(hubs))
    phase0 = rng.uniform(0, 2 * np.pi, len(hubs))
    f = 0.5 * (K.fx + K.fy)

    pc, _, _ = motion(cfg, t0 + 0.5 * dt)
    out_t, out_u, out_v, out_p = [], [], [], []
    for k, off in enumerate(hubs):
        H = pc + off
        Z = H[:, 2]
        uc = K.fx * H[:, 0] / Z + K.cx
        vc = K.fy * H[:, 1] / Z + K.cy
        r_px = f * cfg.propeller_radius / Z
        R = int(np.ceil(r_px.max())) + 1
        seed = int(rng.integers(0, 2 ** 31 - 1))
        tc, px, py = _disk_crossings(uc, vc, r_px, t0, R, spins[k] * omega, phase0[k], sector,
                                     cfg.blade_count, dt, cfg.event_emit_prob, seed)
        m = len(tc)
        if m == 0:
            continue
        out_t += [tc, tc + trail]
        out_u += [px, px]
        out_v += [py, py]
        out_p += [np.ones(m), -np.ones(m)]
    if not out_t:
        return EventArray.empty()
    t = np.concatenate(out_t)
    keep = t < cfg.duration
    ev = _to_events(t[keep], np.concatenate(out_u)[keep], np.concatenate(out_v)[keep],
                    np.concatenate(out_p)[keep], LABEL_DRONE, K, cfg.event_timestamp_resolution)
    return ev


def _background_events(cfg: ScenarioConfig, K: CameraIntrinsics, rng) -> EventArray:
    n = rng.poisson(cfg.background_noise_rate * cfg.duration) if cfg.background_noise_rate > 0 else 0
    if n == 0:
        return EventArray.empty()
    t = rng.uniform(0, cfg.duration, n)
    x = rng.integers(0, K.width, n).astype(float)
    y = rng.integers(0, K.height, n).astype(float)
    pol = np.where(rng.random(n) < cfg.noise_positive_fraction, 1, -1)
    # pixels are already on the sensor grid, skip the lens model
    return EventArray((np.rint(t * 1e6 / cfg.event_timestamp_resolution)
                       * cfg.event_timestamp_resolution).astype(np.int64),
                      x.astype(np.int32), y.astype(np.int32), pol.astype(np.int8),
                      np.full(n, LABEL_BACKGROUND, np.int8))


def _distractor_events(cfg: ScenarioConfig, K: CameraIntrinsics, rng) -> EventArray:
    """Shadows (unipolar image-space blobs) and thrown balls (balanced 3D blobs)."""
    parts = []
    for d in cfg.distractors:
        kind = d.get("kind")
        t_start = float(d.get("t_start", 0.0))
        t_end = float(d.get("t_end", cfg.duration))
        rate = float(d.get("rate", 40.0))  # events per pixel per second
        ts = np.arange(t_start, t_end, 1e-3)
        if kind == "shadow":
            c = np.asarray(d["center_px"], dtype=float) + np.outer(ts - t_start, d.get("velocity_px", (0, 0)))
            r = np.full(len(ts), float(d.get("radius_px", 15.0)))
            frac = float(d.get("positive_fraction", 0.05))
        elif kind == "ball":
            P = np.asarray(d["position"], dtype=float) + np.outer(ts - t_start, d.get("velocity", (0, 0, 0)))
            c = np.column_stack([K.fx * P[:, 0] / P[:, 2] + K.cx, K.fy * P[:, 1] / P[:, 2] + K.cy])
            r = K.fx * float(d.get("radius", 0.08)) / P[:, 2]
            frac = 0.5
        else:
            raise InvalidConfig(f"unknown distractor kind {kind!r}")
        counts = rng.poisson(rate * np.pi * r ** 2 * 1e-3)
        idx = np.repeat(np.arange(len(ts)), counts)
        m = len(idx)
        if m == 0:
            continue
        rho = r[idx] * np.sqrt(rng.random(m))
        th = rng.uniform(0, 2 * np.pi, m)
        t = ts[idx] + rng.random(m) * 1e-3
        pol = np.where(rng.random(m) < frac, 1, -1)
        parts.append(_to_events(t, c[idx, 0] + rho * np.cos(th), c[idx, 1] + rho * np.sin(th), pol,
                                LABEL_BACKGROUND, K, cfg.event_timestamp_resolution))
    return EventArray.concat(parts)


def synthesize_events(traj: GroundTruthTrajectory, cfg: ScenarioConfig,
                      intrinsics: Optional[CameraIntrinsics] = None) -> EventArray:
    K = intrinsics or cfg.calibration_obj().intrinsics
    vis = visibility(traj, K)
    if vis < 0.9:
        raise DroneOutOfView(f"drone visible for {100 * vis:.1f}% of the scenario")
    rngs = _streams(cfg.seed)
    ev = EventArray.concat([
        _propeller_events(cfg, K, rngs["events"]),
        _background_events(cfg, K, rngs["noise"]),
        _distractor_events(cfg, K, rngs["distractors"]),
    ])
    return ev.sorted()


# ----------------------------------------------------------------------------
# radar


class RadarPoint(NamedTuple):
    D: float
    theta_x: float
    theta_y: float
    label: str  # "drone" or "ghost"


@dataclass
class RadarFrame:
    t: int
    points: list
    if_samples: Optional[np.ndarray] = None  # (n_points, 3, N) complex: ref, x-pair, y-pair


def _noisy_angles(q, sigma_th, rng):
    D = np.linalg.norm(q)
    tx0, ty0 = np.arccos(q[0] / D), np.arccos(q[1] / D)
    for _ in range(100):
        tx = tx0 + sigma_th * rng.standard_normal()
        ty = ty0 + sigma_th * rng.standard_normal()
        if np.cos(tx) ** 2 + np.cos(ty) ** 2 <= 1.0:
            return tx, ty
    return tx0, ty0


def _if_channels(D, tx, ty, chirp: ChirpConfig, amp, noise, rng):
    n = np.arange(chirp.samples_per_chirp)
    phi0 = rng.uniform(0, 2 * np.pi)
    base = amp * np.exp(1j * (2 * np.pi * chirp.if_frequency(D) * n / chirp.sample_rate + phi0))
    k = 2 * np.pi * chirp.antenna_spacing / chirp.wavelength
    ch = np.vstack([base, base * np.exp(1j * k * np.cos(tx)), base * np.exp(1j * k * np.cos(ty))])
    if noise > 0:
        ch = ch + noise / np.sqrt(2) * (rng.standard_normal(ch.shape) + 1j * rng.standard_normal(ch.shape))
    return ch


def synthesize_radar(traj: GroundTruthTrajectory, cfg: ScenarioConfig,
                     extrinsics: Optional[RigidTransform] = None) -> list:
    cfg.validate()
    T = extrinsics or cfg.calibration_obj().radar_to_camera
    chirp = cfg.chirp_config()
    rng = _streams(cfg.seed)["radar"]
    period_us = 1e6 / cfg.radar_frame_rate
    n = int(np.floor(cfg.duration * cfg.radar_frame_rate + 1e-9)) + 1
    times = np.rint(np.arange(n) * period_us).astype(np.int64)
    pos, _, _ = motion(cfg, times * 1e-6)
    sin_fov = np.sin(cfg.radar_fov)

    balls = [d for d in cfg.distractors if d.get("kind") == "ball" and d.get("radar", True)]
    frames = []
    for i, t in enumerate(times):
        truth = []  # (D, tx, ty, label)
        targets = [(pos[i], "drone")]
        ts = t * 1e-6
        for b in balls:
            if float(b.get("t_start", 0.0)) <= ts < float(b.get("t_end", cfg.duration)):
                P = np.asarray(b["position"], float) + (ts - float(b.get("t_start", 0.0))) * np.asarray(
                    b.get("velocity", (0, 0, 0)), float)
                targets.append((P, "ghost"))
        for P, lab in targets:
            q = T.rotation.T @ (P - T.translation)
            D = float(np.linalg.norm(q)) + cfg.radar_sigma_D * rng.standard_normal()
            tx, ty = _noisy_angles(q, cfg.radar_sigma_theta, rng)
            truth.append((D, tx, ty, lab))
        D_true = float(np.linalg.norm(T.rotation.T @ (pos[i] - T.translation)))
        for _ in range(rng.poisson(cfg.multipath_ghost_rate) if cfg.multipath_ghost_rate > 0 else 0):
            D = rng.uniform(max(0.3, D_true - cfg.ghost_shell), min(chirp.max_range, D_true + cfg.ghost_shell))
            while True:
                cx, cy = rng.uniform(-sin_fov, sin_fov, 2)
                if cx * cx + cy * cy <= sin_fov ** 2:
                    break
            truth.append((D, float(np.arccos(cx)), float(np.arccos(cy)), "ghost"))
        order = rng.permutation(len(truth))
        pts = [RadarPoint(float(truth[j][0]), float(truth[j][1]), float(truth[j][2]), truth[j][3]) for j in order]
        ifs = None
        if cfg.raw_if:
            ifs = np.stack([_if_channels(p.D, p.theta_x, p.theta_y, chirp,
                                         1.0 if p.label == "drone" else 0.5, cfg.if_noise, rng) for p in pts])
        frames.append(RadarFrame(int(t), pts, ifs))
    return frames


# ----------------------------------------------------------------------------
# imu


@dataclass
class ImuArray:
    t: np.ndarray  # int64 us
    acc: np.ndarray  # n x 3, frame E, gravity removed

    def __len__(self):
        return len(self.t)


def synthesize_imu(traj: GroundTruthTrajectory, cfg: ScenarioConfig) -> ImuArray:
    rng = _streams(cfg.seed)["imu"]
    n = int(np.floor(cfg.duration * cfg.imu_rate + 1e-9)) + 1
    t_us = np.rint(np.arange(n) * 1e6 / cfg.imu_rate).astype(np.int64)
    _, _, a = motion(cfg, t_us * 1e-6)
    a = a + np.asarray(cfg.imu_bias, dtype=float)
    if cfg.imu_noise > 0:
        a = a + cfg.imu_noise * rng.standard_normal(a.shape)
    return ImuArray(t_us, a)


# ----------------------------------------------------------------------------
# dataset container and files


@dataclass
class Scenario:
    config: ScenarioConfig
    calibration: Calibration
    truth: GroundTruthTrajectory
    events: EventArray
    radar: list
    imu: ImuArray

    def save(self, out_dir) -> None:
        save_scenario(self, out_dir)


def generate(cfg: ScenarioConfig) -> Scenario:
    cfg.validate()
    cal = cfg.calibration_obj()
    traj = generate_trajectory(cfg)
    return Scenario(cfg, cal, traj,
                    synthesize_events(traj, cfg, cal.intrinsics),
                    synthesize_radar(traj, cfg, cal.radar_to_camera),
                    synthesize_imu(traj, cfg))


_FLOAT = "%.17g"


def save_scenario(sc: Scenario, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ev = sc.events
    pd.DataFrame({"t_us": ev.t, "x": ev.x, "y": ev.y, "polarity": ev.p,
                  "label": np.where(ev.label == LABEL_DRONE, "drone", "background")}
                 ).to_csv(out / "events.csv", index=False)
    rows = [(fr.t, j, p.D, p.theta_x, p.theta_y, p.label) for fr in sc.radar for j, p in enumerate(fr.points)]
    pd.DataFrame(rows, columns=["t_us", "point_idx", "D_m", "theta_x_rad", "theta_y_rad", "label"]
                 ).to_csv(out / "radar.csv", index=False, float_format=_FLOAT)
    pd.DataFrame({"t_us": sc.imu.t, "ax": sc.imu.acc[:, 0], "ay": sc.imu.acc[:, 1], "az": sc.imu.acc[:, 2]}
                 ).to_csv(out / "imu.csv", index=False, float_format=_FLOAT)
    tr = sc.truth
    pd.DataFrame({"t_us": tr.t, "px": tr.position[:, 0], "py": tr.position[:, 1], "pz": tr.position[:, 2],
                  "vx": tr.velocity[:, 0], "vy": tr.velocity[:, 1], "vz": tr.velocity[:, 2]}
                 ).to_csv(out / "truth.csv", index=False, float_format=_FLOAT)
    cfg = sc.config.to_dict()
    cfg["calibration"] = sc.calibration.to_dict()
    (out / "scenario.json").write_text(json.dumps(cfg, indent=2))
    if sc.config.raw_if:
        from .radar import write_if_binary
        write_if_binary(out / "radar_if.bin", sc.radar, sc.config.chirp_config())


def _read_csv(path: Path, columns) -> pd.DataFrame:
    if not path.exists():
        raise SchemaError(path, "file not found")
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise SchemaError(path, f"unreadable CSV ({exc})") from exc
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(path, f"missing columns {missing}")
    return df


def read_events_csv(path) -> EventArray:
    df = _read_csv(Path(path), ["t_us", "x", "y", "polarity"])
    lab = df["label"].to_numpy() if "label" in df.columns else np.full(len(df), "background")
    return EventArray(df["t_us"].to_numpy(np.int64), df["x"].to_numpy(np.int32), df["y"].to_numpy(np.int32),
                      df["polarity"].to_numpy(np.int8),
                      np.where(lab == "drone", LABEL_DRONE, LABEL_BACKGROUND).astype(np.int8))


def read_radar_csv(path) -> list:
    df = _read_csv(Path(path), ["t_us", "point_idx", "D_m", "theta_x_rad", "theta_y_rad"])
    if "label" not in df.columns:
        df["label"] = "ghost"
    frames = []
    for t, g in df.sort_values(["t_us", "point_idx"], kind="stable").groupby("t_us", sort=True):
        pts = [RadarPoint(float(r.D_m), float(r.theta_x_rad), float(r.theta_y_rad), str(r.label))
               for r in g.itertuples(index=False)]
        frames.append(RadarFrame(int(t), pts))
    return frames


def read_truth_csv(path) -> GroundTruthTrajectory:
    df = _read_csv(Path(path), ["t_us", "px", "py", "pz", "vx", "vy", "vz"])
    t = df["t_us"].to_numpy(np.int64)
    v = df[["vx", "vy", "vz"]].to_numpy(float)
    acc = np.gradient(v, t * 1e-6, axis=0) if len(t) > 1 else np.zeros_like(v)
    return GroundTruthTrajectory(t, df[["px", "py", "pz"]].to_numpy(float), v, acc)


def load_scenario(in_dir) -> Scenario:
    d = Path(in_dir)
    cfg_path = d / "scenario.json"
    if not cfg_path.exists():
        raise SchemaError(cfg_path, "file not found")
    try:
        raw = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(cfg_path, f"invalid JSON ({exc})") from exc
    try:
        cfg = ScenarioConfig.from_dict(raw)
    except (TypeError, InvalidConfig) as exc:
        raise SchemaError(cfg_path, str(exc)) from exc
    cal = cfg.calibration_obj()
    radar = read_radar_csv(d / "radar.csv")
    if cfg.raw_if and (d / "radar_if.bin").exists():
        from .radar import read_if_binary
        _, _, _, recs = read_if_binary(d / "radar_if.bin")
        for fr in radar:
            rec = recs.get(fr.t)
            if rec is not None and len(rec) == len(fr.points):
                fr.if_samples = np.stack([rec[j] for j in range(len(fr.points))])
    imu_df = _read_csv(d / "imu.csv", ["t_us", "ax", "ay", "az"])
    imu = ImuArray(imu_df["t_us"].to_numpy(np.int64), imu_df[["ax", "ay", "az"]].to_numpy(float))
    return Scenario(cfg, cal, read_truth_csv(d / "truth.csv"), read_events_csv(d / "events.csv"), radar, imu)
