"""Reference frames, rigid transforms and the pinhole event-camera model.

Frame E (camera) is the world/optimization frame. Units: meters, radians,
integer microseconds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import NoConvergence, NonPositiveDepth


class Pixel(NamedTuple):
    u: float
    v: float


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray


def vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector {v}")
    return v


@dataclass(frozen=True)
class RigidTransform:
    """p_target = rotation @ p_source + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = vec3(self.translation)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_quaternion(cls, wxyz: Sequence[float], translation: Sequence[float]) -> "RigidTransform":
        return cls(quaternion_to_matrix(wxyz), np.asarray(translation, dtype=float))

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def to_quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.rotation)


def quaternion_to_matrix(wxyz: Sequence[float]) -> np.ndarray:
    w, x, y, z = np.asarray(wxyz, dtype=float) / np.linalg.norm(wxyz)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    # Shepperd's method, w kept non-negative
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return -q if q[0] < 0 else q


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    # polynomial radial model k1, k2, k3 on normalized coordinates
    distortion: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the sensor")
        k = tuple(float(c) for c in self.distortion)
        if len(k) > 3:
            raise ValueError("at most 3 radial coefficients")
        object.__setattr__(self, "distortion", k + (0.0,) * (3 - len(k)))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return any(k != 0.0 for k in self.distortion)


def transform_point(T: RigidTransform, p) -> np.ndarray:
    return T.rotation @ np.asarray(p, dtype=float) + T.translation


def project(K: CameraIntrinsics, X_E) -> Pixel:
    X, Y, Z = np.asarray(X_E, dtype=float)
    if not Z > 0:
        raise NonPositiveDepth(f"point depth {Z} <= 0")
    return Pixel(K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy)


def _radial_factor(k, r2):
    return 1.0 + r2 * (k[0] + r2 * (k[1] + r2 * k[2]))


def distort(K: CameraIntrinsics, p) -> Pixel:
    """Apply the forward radial model to an ideal pixel."""
    xn = (p[0] - K.cx) / K.fx
    yn = (p[1] - K.cy) / K.fy
    f = _radial_factor(K.distortion, xn * xn + yn * yn)
    return Pixel(K.fx * xn * f + K.cx, K.fy * yn * f + K.cy)


def distort_many(K: CameraIntrinsics, u: np.ndarray, v: np.ndarray):
    xn = (u - K.cx) / K.fx
    yn = (v - K.cy) / K.fy
    f = _radial_factor(K.distortion, xn * xn + yn * yn)
    return K.fx * xn * f + K.cx, K.fy * yn * f + K.cy


def undistort(K: CameraIntrinsics, p, max_iter: int = 20, tol: float = 1e-9) -> Pixel:
    """Invert the radial model by fixed-point iteration."""
    if not K.has_distortion:
        return Pixel(float(p[0]), float(p[1]))
    mu, mv = 0.1 * K.width, 0.1 * K.height
    if not (-mu <= p[0] <= K.width + mu and -mv <= p[1] <= K.height + mv):
        raise ValueError(f"pixel {tuple(p)} outside the sensor bounds")
    xd = (p[0] - K.cx) / K.fx
    yd = (p[1] - K.cy) / K.fy
    x, y = xd, yd
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            f = _radial_factor(K.distortion, x * x + y * y)
            x, y = xd / f, yd / f
        f = _radial_factor(K.distortion, x * x + y * y)
        res = np.hypot((x * f - xd) * K.fx, (y * f - yd) * K.fy)
    if not np.isfinite(res) or res > tol:
        raise NoConvergence(f"undistortion residual {res:.3g} px after {max_iter} iterations")
    return Pixel(K.fx * x + K.cx, K.fy * y + K.cy)


def backproject_ray(K: CameraIntrinsics, p) -> Ray:
    d = np.array([(p[0] - K.cx) / K.fx, (p[1] - K.cy) / K.fy, 1.0])
    return Ray(np.zeros(3), d / np.linalg.norm(d))


def point_ray_distance(ray: Ray, point) -> float:
    """Perpendicular distance; points behind the origin measure to the origin."""
    w = np.asarray(point, dtype=float) - ray.origin
    s = float(w @ ray.direction)
    if s <= 0:
        return float(np.linalg.norm(w))
    return float(np.linalg.norm(w - s * ray.direction))


@dataclass(frozen=True)
class Calibration:
    intrinsics: CameraIntrinsics
    radar_to_camera: RigidTransform  # R -> E

    def to_dict(self) -> dict:
        K = self.intrinsics
        T = self.radar_to_camera
        return {
            "intrinsics": {
                "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
                "width": K.width, "height": K.height,
                "distortion": list(K.distortion),
            },
            "radar_to_camera": {
                "quaternion_wxyz": [float(q) for q in T.to_quaternion()],
                "translation": [float(t) for t in T.translation],
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        k = d["intrinsics"]
        K = CameraIntrinsics(
            float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
            int(k["width"]), int(k["height"]), tuple(k.get("distortion", ())),
        )
        e = d.get("radar_to_camera", {})
        T = RigidTransform.from_quaternion(
            e.get("quaternion_wxyz", (1.0, 0.0, 0.0, 0.0)), e.get("translation", (0.0, 0.0, 0.0))
        )
        return cls(K, T)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Calibration":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_calibration() -> Calibration:
    K = CameraIntrinsics(1000.0, 1000.0, 640.0, 360.0, 1280, 720)
    return Calibration(K, RigidTransform(np.eye(3), np.array([0.08, 0.0, 0.0])))
