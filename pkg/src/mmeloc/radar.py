"""FMCW radar tracking: range FFT, angle of arrival, direction and translation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import InconsistentAngles, NoPeak, OutOfRange, SchemaError
from .geometry import RigidTransform, transform_point

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ChirpConfig:
    f_c: float = 77e9
    slope: float = 3.0e13  # K, Hz/s
    sample_rate: float = 10e6
    samples_per_chirp: int = 256
    antenna_spacing: Optional[float] = None  # defaults to half a wavelength
    max_range: float = 20.0
    zero_pad: int = 16

    def __post_init__(self):
        if self.slope <= 0:
            raise ValueError("chirp slope must be positive")
        if self.antenna_spacing is None:
            object.__setattr__(self, "antenna_spacing", self.wavelength / 2)
        if self.sample_rate <= 2 * self.if_frequency(self.max_range):
            raise ValueError("sample rate too low for max_range")
        if self.antenna_spacing > self.wavelength / 2 + 1e-15:
            raise ValueError("antenna spacing above lambda/2 makes AoA ambiguous")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f_c

    @property
    def bandwidth(self) -> float:
        return self.slope * self.samples_per_chirp / self.sample_rate

    @property
    def range_resolution(self) -> float:
        return SPEED_OF_LIGHT / (2 * self.bandwidth)

    def if_frequency(self, distance: float) -> float:
        return 2 * self.slope * distance / SPEED_OF_LIGHT

    def distance(self, f_if: float) -> float:
        return SPEED_OF_LIGHT * f_if / (2 * self.slope)


@dataclass
class RadarMeasurement:
    t: int
    D: float
    direction: np.ndarray  # unit vector, radar frame
    P_E: np.ndarray
    U_E: Optional[np.ndarray] = None
    snr: float = float("nan")
    index: int = -1  # point index within its frame


# ----------------------------------------------------------------------------
# signal model


def _spectrum(samples: np.ndarray, cfg: ChirpConfig):
    n = len(samples)
    nfft = 1 << int(np.ceil(np.log2(n * max(cfg.zero_pad, 1))))
    win = np.hanning(n)
    spectrum = np.fft.fft(samples * win, nfft)
    return spectrum, nfft


def range_fft(if_samples, cfg: ChirpConfig) -> tuple[float, float]:
    """Dominant IF tone and the corresponding distance.

    Returns (f_IF, D). Peak refined by a parabola through the log-magnitude
    of the three bins around the maximum.
    """
    s = np.asarray(if_samples, dtype=complex)
    if len(s) < 64:
        raise ValueError("need at least 64 samples per chirp")
    spectrum, nfft = _spectrum(s, cfg)
    # complex baseband: only non-negative IF frequencies are physical
    mag = np.abs(spectrum[: nfft // 2])
    peak = mag.max()
    if not peak > 0 or peak < 3 * np.median(mag):
        raise NoPeak("no spectral peak above 3x median")

    best = None
    # local maxima near the global peak compete after interpolation; ties
    # (1e-9 in log-magnitude) resolve to the lower frequency
    cand = np.flatnonzero((mag >= 0.5 * peak)
                          & (mag >= np.roll(mag, 1)) & (mag >= np.roll(mag, -1)))
    for k in cand:
        if k == 0 or k == len(mag) - 1:
            off, level = 0.0, np.log(mag[k])
        else:
            a, b, c = np.log(mag[k - 1:k + 2] + 1e-300)
            den = a - 2 * b + c
            off = 0.5 * (a - c) / den if den < 0 else 0.0
            level = b - 0.25 * (a - c) * off
        freq = (k + off) * cfg.sample_rate / nfft
        if best is None or level > best[0] + 1e-9:
            best = (level, freq)
    f_if = float(best[1])
    return f_if, float(cfg.distance(f_if))


def peak_phase_difference(ref: np.ndarray, other: np.ndarray, cfg: ChirpConfig) -> float:
    """Phase of `other` relative to `ref` at the reference channel's range peak."""
    sr, nfft = _spectrum(np.asarray(ref, dtype=complex), cfg)
    so, _ = _spectrum(np.asarray(other, dtype=complex), cfg)
    k = int(np.argmax(np.abs(sr[: nfft // 2])))
    return float(np.angle(so[k] * np.conj(sr[k])))


def estimate_aoa(phase_diff: float, cfg: ChirpConfig) -> float:
    if abs(phase_diff) > np.pi:
        raise OutOfRange(f"|phase difference| {abs(phase_diff):.4f} > pi")
    arg = phase_diff * cfg.wavelength / (2 * np.pi * cfg.antenna_spacing)
    if abs(arg) > 1.0 + 1e-12:
        raise OutOfRange(f"cos(theta) = {arg:.4f} outside [-1, 1]")
    return float(np.arccos(np.clip(arg, -1.0, 1.0)))


def direction_vector(theta_x: float, theta_y: float) -> np.ndarray:
    cx, cy = np.cos(theta_x), np.cos(theta_y)
    s = cx * cx + cy * cy
    if s > 1.0 + 1e-9:
        raise InconsistentAngles(f"cos^2(theta_x) + cos^2(theta_y) = {s:.6f} > 1")
    return np.array([cx, cy, np.sqrt(max(0.0, 1.0 - s))])


def angles_from_direction(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=float) / np.linalg.norm(v)
    return float(np.arccos(np.clip(v[0], -1, 1))), float(np.arccos(np.clip(v[1], -1, 1)))


def preliminary_location(D: float, direction, extrinsics: RigidTransform) -> np.ndarray:
    return transform_point(extrinsics, D * np.asarray(direction, dtype=float))


def update_translation(prev, P_E_curr, P_E_prev):
    U = np.asarray(P_E_curr, dtype=float) - np.asarray(P_E_prev, dtype=float)
    return np.asarray(prev, dtype=float) + U, U


# ----------------------------------------------------------------------------
# tracker


class RadarTracker:
    """Turns radar frames into measurements and chains the object translation.

    The running translation is owned by one tracker instance.
    """

    def __init__(self, extrinsics: RigidTransform, chirp: Optional[ChirpConfig] = None):
        self.extrinsics = extrinsics
        self.chirp = chirp or ChirpConfig()
        self.t_EO: Optional[np.ndarray] = None
        self._prev: Optional[RadarMeasurement] = None

    def measure(self, frame) -> list[RadarMeasurement]:
        """All points of one frame; points with inconsistent angles are dropped."""
        out = []
        for idx, pt in enumerate(frame.points):
            D, tx, ty = pt.D, pt.theta_x, pt.theta_y
            if frame.if_samples is not None:
                ch = frame.if_samples[idx]
                try:
                    _, D = range_fft(ch[0], self.chirp)
                    tx = estimate_aoa(peak_phase_difference(ch[0], ch[1], self.chirp), self.chirp)
                    ty = estimate_aoa(peak_phase_difference(ch[0], ch[2], self.chirp), self.chirp)
                except (NoPeak, OutOfRange):
                    continue
            try:
                v = direction_vector(tx, ty)
            except InconsistentAngles:
                continue
            if not D > 0:
                continue
            P = preliminary_location(D, v, self.extrinsics)
            out.append(RadarMeasurement(frame.t, float(D), v, P, index=idx))
        return out

    def associate(self, m: Optional[RadarMeasurement], consecutive: bool = True) -> Optional[RadarMeasurement]:
        """Register the object's point for this frame and fill in its displacement.

        The displacement is only reported when the previous frame also
        contributed a point (`consecutive`).
        """
        if m is None:
            self._prev = None
            return None
        if self._prev is not None and consecutive:
            self.t_EO, m.U_E = update_translation(self.t_EO, m.P_E, self._prev.P_E)
        else:
            self.t_EO = m.P_E.copy()
        self._prev = m
        return m


# ----------------------------------------------------------------------------
# raw IF binary: header <d sample_rate><d slope><I samples_per_chirp><I channels>,
# then per record <q t_us><i point_idx> followed by channels*N complex64 values


_HEADER = struct.Struct("<ddII")
_RECORD = struct.Struct("<qi")


def write_if_binary(path, frames: Iterable, chirp: ChirpConfig, channels: int = 3) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(chirp.sample_rate, chirp.slope, chirp.samples_per_chirp, channels))
        for fr in frames:
            if fr.if_samples is None:
                continue
            for idx, ch in enumerate(fr.if_samples):
                fh.write(_RECORD.pack(int(fr.t), idx))
                fh.write(np.asarray(ch, dtype="<c8").tobytes())


def read_if_binary(path):
    """Returns (sample_rate, slope, samples_per_chirp, {t_us: {point_idx: samples}})."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise SchemaError(path, "truncated header")
    fs, K, n, channels = _HEADER.unpack_from(data, 0)
    rec = _RECORD.size + channels * n * 8
    body = data[_HEADER.size:]
    if len(body) % rec:
        raise SchemaError(path, "truncated record")
    out: dict = {}
    for off in range(0, len(body), rec):
        t, idx = _RECORD.unpack_from(body, off)
        s = np.frombuffer(body, dtype="<c8", count=channels * n, offset=off + _RECORD.size)
        out.setdefault(t, {})[idx] = s.reshape(channels, n).astype(complex)
    return fs, K, n, out
