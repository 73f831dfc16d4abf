"""Factor-graph fusion of event and radar measurements.

Each radar frame adds one location node t_ED^i (drone position in the camera
frame E). An instant estimate comes from a damped Gauss-Newton solve over the
newest node alone; an IMU-driven consistency check decides when a window of
recent nodes is re-optimized jointly through the square-root solver.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import Diverged, InsufficientHistory, SolverFailure
from .geometry import CameraIntrinsics, Pixel, RigidTransform
from .isolver import IncrementalSolver, RelinState

_EYE3 = np.eye(3)

PIPELINES = {
    "fused": ("ET", "RT"),
    "radar_only": ("RT",),
    "event_only": ("ET",),
}


@dataclass(frozen=True)
class NoiseModel:
    sigma_ET: float = 2.0  # px
    Sigma_E: Optional[tuple] = None  # 2x2 covariance, defaults to sigma_ET^2 I
    sigma_D: float = 0.05
    sigma_v: float = 0.02
    sigma_UE: float = 0.25
    sigma_tED: float = 0.05
    huber_k: Optional[float] = 1.345  # None disables the robust kernel

    def __post_init__(self):
        if min(self.sigma_ET, self.sigma_D, self.sigma_v, self.sigma_UE, self.sigma_tED) <= 0:
            raise ValueError("all noise sigmas must be positive")
        S = self.Sigma_E_matrix
        if not (np.allclose(S, S.T) and np.all(np.linalg.eigvalsh(S) > 0)):
            raise ValueError("Sigma_E must be symmetric positive definite")

    @property
    def Sigma_E_matrix(self) -> np.ndarray:
        if self.Sigma_E is None:
            return self.sigma_ET ** 2 * np.eye(2)
        return np.asarray(self.Sigma_E, dtype=float).reshape(2, 2)

    @property
    def W_E(self) -> np.ndarray:
        # whitening: W^T W = Sigma_E^-1
        L = np.linalg.cholesky(self.Sigma_E_matrix)
        return np.linalg.inv(L)


@dataclass
class MeasurementBundle:
    t: int
    x: Optional[Pixel] = None
    D: Optional[float] = None
    direction: Optional[np.ndarray] = None
    U_E: Optional[np.ndarray] = None
    P_E: Optional[np.ndarray] = None  # preliminary radar location, used for bootstrap

    @property
    def coast_only(self) -> bool:
        return self.x is None and self.D is None


@dataclass
class StateNode:
    t: int
    t_ED: np.ndarray
    linearization_point: np.ndarray
    fixed: bool = False
    refined: bool = False
    diverged: bool = False


# ----------------------------------------------------------------------------
# factors


def huber_weight(s: float, k: Optional[float]) -> float:
    """IRLS weight for residual norm s (rho(s^2) = s^2 inside k, 2ks - k^2 outside)."""
    if k is None or s <= k:
        return 1.0
    return k / s


def huber_rho(s2: float, k: Optional[float]) -> float:
    if k is None:
        return s2
    s = np.sqrt(s2)
    return s2 if s <= k else 2 * k * s - k * k


class PriorFactor:
    """Constant-velocity prior: t^i - (2 t^{i-1} - t^{i-2})."""

    dim = 3

    def __init__(self, i: int, sigma: float):
        self.keys = (i - 2, i - 1, i)
        self.sigma = sigma

    def residual(self, v: dict) -> np.ndarray:
        a, b, c = (v[k] for k in self.keys)
        return (c - 2 * b + a) / self.sigma

    def jacobian(self, v: dict) -> list:
        I = np.eye(3) / self.sigma
        return [I, -2 * I, I]

    def whitened(self, v: dict):
        return self.residual(v), self.jacobian(v)

    @staticmethod
    def batch_whitened(fs: list, v: dict):
        P = np.array([[v[k] for k in f.keys] for f in fs])  # k x 3 x 3
        s = np.array([f.sigma for f in fs])[:, None]
        r = (P[:, 2] - 2 * P[:, 1] + P[:, 0]) / s
        I = np.eye(3)[None] / s[:, :, None]
        return r, [I, -2 * I, I]

    def energy(self, v: dict) -> float:
        r = self.residual(v)
        return float(r @ r)


class ETFactor:
    """Bearing from the event-box center: pi(t^i) - x^i, whitened by Sigma_E."""

    dim = 2

    def __init__(self, i: int, x, K: CameraIntrinsics, noise: NoiseModel):
        self.keys = (i,)
        self.x = np.asarray(x, dtype=float)
        self.K = K
        self.W = noise.W_E
        self.k = noise.huber_k

    def _proj(self, p):
        X, Y, Z = p
        if not Z > 0:
            return None
        return np.array([self.K.fx * X / Z + self.K.cx, self.K.fy * Y / Z + self.K.cy])

    def residual(self, v: dict) -> np.ndarray:
        u = self._proj(v[self.keys[0]])
        if u is None:
            return np.full(2, np.nan)
        return self.W @ (u - self.x)

    def jacobian(self, v: dict) -> list:
        X, Y, Z = v[self.keys[0]]
        fx, fy = self.K.fx, self.K.fy
        J = np.array([[fx / Z, 0.0, -fx * X / Z ** 2],
                      [0.0, fy / Z, -fy * Y / Z ** 2]])
        return [self.W @ J]

    def whitened(self, v: dict):
        r = self.residual(v)
        J = self.jacobian(v)[0]
        w = np.sqrt(huber_weight(float(np.linalg.norm(r)), self.k)) if np.all(np.isfinite(r)) else 1.0
        return w * r, [w * J]

    @staticmethod
    def batch_whitened(fs: list, v: dict):
        P = np.array([v[f.keys[0]] for f in fs])
        x = np.array([f.x for f in fs])
        W = np.array([f.W for f in fs])
        fx = np.array([f.K.fx for f in fs])
        fy = np.array([f.K.fy for f in fs])
        cx = np.array([f.K.cx for f in fs])
        cy = np.array([f.K.cy for f in fs])
        X, Y, Z = P.T
        with np.errstate(divide="ignore", invalid="ignore"):
            Zs = np.where(Z > 0, Z, np.nan)
            e = np.column_stack([fx * X / Zs + cx, fy * Y / Zs + cy]) - x
            J = np.zeros((len(fs), 2, 3))
            J[:, 0, 0] = fx / Zs
            J[:, 0, 2] = -fx * X / Zs ** 2
            J[:, 1, 1] = fy / Zs
            J[:, 1, 2] = -fy * Y / Zs ** 2
        r = np.einsum("kij,kj->ki", W, e)
        J = np.einsum("kij,kjl->kil", W, J)
        w = np.ones(len(fs))
        k = fs[0].k
        if k is not None:
            nr = np.linalg.norm(r, axis=1)
            big = nr > k
            w[big] = np.sqrt(k / nr[big])
        return w[:, None] * r, [w[:, None, None] * J]

    def energy(self, v: dict) -> float:
        r = self.residual(v)
        if not np.all(np.isfinite(r)):
            return np.inf
        return float(huber_rho(float(r @ r), self.k))


class RTFactor:
    """Radar distance, direction and (optionally) displacement terms.

    q = R_ER^T (t^i - t_ER) is the node seen from the radar. Rows: (|q| - D)/s_D,
    (q/|q| - v)/s_v, and ((t^i - t^{i-1}) - U_E)/s_U when U_E is present.
    """

    def __init__(self, i: int, D: Optional[float], direction, U_E, extrinsics: RigidTransform, noise: NoiseModel):
        self.i = i
        self.D = None if D is None else float(D)
        self.v = None if direction is None else np.asarray(direction, dtype=float)
        self.U = None if U_E is None else np.asarray(U_E, dtype=float)
        self.Rt = extrinsics.rotation.T
        self.tER = extrinsics.translation
        self.s_D, self.s_v, self.s_U = noise.sigma_D, noise.sigma_v, noise.sigma_UE
        self.keys = (i - 1, i) if self.U is not None else (i,)
        self.dim = (4 if self.D is not None else 0) + (3 if self.U is not None else 0)

    def _geometry(self, t):
        q = self.Rt @ (t - self.tER)
        n = math.sqrt(q @ q)
        return q, n, q / n

    def residual(self, v: dict) -> np.ndarray:
        t = v[self.i]
        out = []
        if self.D is not None:
            q, n, u = self._geometry(t)
            out.append([(n - self.D) / self.s_D])
            out.append((u - self.v) / self.s_v)
        if self.U is not None:
            out.append((t - v[self.i - 1] - self.U) / self.s_U)
        return np.concatenate(out)

    def jacobian(self, v: dict) -> list:
        return self.whitened(v)[1]

    def whitened(self, v: dict):
        t = v[self.i]
        J = np.empty((self.dim, 3))
        r = np.empty(self.dim)
        if self.D is not None:
            q, n, u = self._geometry(t)
            r[0] = (n - self.D) / self.s_D
            r[1:4] = (u - self.v) / self.s_v
            J[0] = (u @ self.Rt) / self.s_D
            J[1:4] = ((_EYE3 - np.outer(u, u)) / n) @ self.Rt / self.s_v
        if self.U is not None:
            r[-3:] = (t - v[self.i - 1] - self.U) / self.s_U
            J[-3:] = _EYE3 / self.s_U
            Jp = np.zeros((self.dim, 3))
            Jp[-3:] = -J[-3:]
            return r, [Jp, J]
        return r, [J]

    @staticmethod
    def batch_whitened(fs: list, v: dict):
        f0 = fs[0]
        n_f = len(fs)
        T = np.array([v[f.i] for f in fs])
        rs, Ji = [], []
        if f0.D is not None:
            Rt = np.array([f.Rt for f in fs])
            q = np.einsum("kij,kj->ki", Rt, T - np.array([f.tER for f in fs]))
            n = np.linalg.norm(q, axis=1)
            u = q / n[:, None]
            sD = np.array([f.s_D for f in fs])
            sv = np.array([f.s_v for f in fs])
            rs.append(((n - np.array([f.D for f in fs])) / sD)[:, None])
            rs.append((u - np.array([f.v for f in fs])) / sv[:, None])
            Ji.append(np.einsum("ki,kij->kj", u, Rt)[:, None, :] / sD[:, None, None])
            Pn = (np.eye(3)[None] - u[:, :, None] * u[:, None, :]) / n[:, None, None]
            Ji.append(np.einsum("kij,kjl->kil", Pn, Rt) / sv[:, None, None])
        if f0.U is not None:
            sU = np.array([f.s_U for f in fs])
            prev = np.array([v[f.i - 1] for f in fs])
            rs.append((T - prev - np.array([f.U for f in fs])) / sU[:, None])
            I = np.broadcast_to(np.eye(3), (n_f, 3, 3)) / sU[:, None, None]
            Ji.append(I)
            r = np.concatenate(rs, axis=1)
            Jp = np.concatenate([np.zeros((n_f, f0.dim - 3, 3)), -I], axis=1)
            return r, [Jp, np.concatenate(Ji, axis=1)]
        return np.concatenate(rs, axis=1), [np.concatenate(Ji, axis=1)]

    def energy(self, v: dict) -> float:
        r = self.residual(v)
        return float(r @ r) if np.all(np.isfinite(r)) else np.inf


def prior_predict(t_prev, t_prev2) -> np.ndarray:
    if t_prev is None or t_prev2 is None:
        raise InsufficientHistory("prior needs the two preceding locations")
    return 2 * np.asarray(t_prev, dtype=float) - np.asarray(t_prev2, dtype=float)


def factor_energies(values: dict, factors: list, noise: Optional[NoiseModel] = None) -> list:
    """Energy of every factor at `values` (noise is baked into the factors)."""
    return [f.energy(values) for f in factors]


def build_factors(i: int, bundle: Optional[MeasurementBundle], K: CameraIntrinsics, extrinsics: RigidTransform,
                  noise: NoiseModel, terms=("ET", "RT"), with_prior: bool = True) -> list:
    out = []
    if with_prior and i >= 2:
        out.append(PriorFactor(i, noise.sigma_tED))
    if bundle is None:
        return out
    if "ET" in terms and bundle.x is not None:
        out.append(ETFactor(i, bundle.x, K, noise))
    if "RT" in terms and bundle.D is not None:
        U = bundle.U_E if i >= 1 else None
        out.append(RTFactor(i, bundle.D, bundle.direction, U, extrinsics, noise))
    return out


# ----------------------------------------------------------------------------
# inter-SAE tracking


def _stack(factors, v, key="x"):
    rs, Js = [], []
    for f in factors:
        r, J = f.whitened(v)
        blk = np.zeros((len(r), 3))
        for k, Jk in zip(f.keys, J):
            if k == key:
                blk += Jk
        rs.append(r)
        Js.append(blk)
    return np.concatenate(rs), np.vstack(Js)


def _energy(factors, v):
    return sum(f.energy(v) for f in factors)


def inter_sae_track(factors: list, init, context: dict, max_iter: int = 10, tol: float = 1e-6,
                    max_rejects: int = 3) -> tuple[np.ndarray, int]:
    """Minimize the summed energy over the single node keyed "x".

    `context` holds the fixed neighbouring nodes. Levenberg-Marquardt damping:
    a step is accepted only if the energy does not increase. Returns the
    estimate and the number of iterations used.
    """
    x = np.asarray(init, dtype=float).copy()
    if not factors:
        return x, 0
    key = "x"
    if all(isinstance(f, _Rekeyed) for f in factors) and len({f.i for f in factors}) == 1:
        # evaluate the wrapped factors directly under their own node key
        key = factors[0].i
        factors = [f.f for f in factors]
    v = dict(context)
    v[key] = x
    E = _energy(factors, v)
    if not np.isfinite(E):
        raise Diverged("non-finite energy at the initial guess", fallback=x)
    lam = 1e-6
    rejects = 0
    for it in range(1, max_iter + 1):
        r, J = _stack(factors, v, key)
        H = J.T @ J
        g = J.T @ r
        while True:
            try:
                step = -np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-12)), g)
            except np.linalg.LinAlgError:
                step = np.full(3, np.nan)
            if np.linalg.norm(step) < tol:
                return x, it
            v[key] = x + step
            En = _energy(factors, v)
            if np.isfinite(En) and En <= E:
                x, E = v[key], En
                lam = max(lam / 10, 1e-12)
                rejects = 0
                break
            v[key] = x
            rejects += 1
            lam *= 10
            if rejects >= max_rejects:
                raise Diverged(f"energy rose on {rejects} consecutive damped steps", fallback=np.asarray(init, float))
        if np.linalg.norm(step) < tol:
            return x, it
    return x, max_iter


def _rekey(factors, i):
    """Copies of node-i factors keyed so that node i reads as "x"."""
    out = []
    for f in factors:
        g = _Rekeyed(f, i)
        out.append(g)
    return out


class _Rekeyed:
    def __init__(self, f, i):
        self.f, self.i = f, i
        self.keys = tuple("x" if k == i else k for k in f.keys)

    def _v(self, v):
        w = dict(v)
        w[self.i] = v["x"]
        return w

    def whitened(self, v):
        return self.f.whitened(self._v(v))

    def energy(self, v):
        return self.f.energy(self._v(v))


# ----------------------------------------------------------------------------
# adaptive trigger


class ImuIntegrator:
    """Exact integrals of the piecewise-linear acceleration between IMU samples.

    Keeps prefix sums of A0(t) = int a and A1(t) = int s a(s) ds (s relative to
    the first sample) so any double integral over [t0, t1] is O(log n).
    """

    def __init__(self, t_us, acc):
        self.t = np.asarray(t_us, dtype=np.int64)
        self.s = (self.t - self.t[0]) * 1e-6
        self.a = np.asarray(acc, dtype=float).reshape(-1, 3)
        ds = np.diff(self.s)[:, None]
        a0, a1 = self.a[:-1], self.a[1:]
        s0, s1 = self.s[:-1, None], self.s[1:, None]
        seg0 = 0.5 * ds * (a0 + a1)
        # int_{s0}^{s1} s a(s) ds for linear a
        seg1 = ds * (a0 * (2 * s0 + s1) + a1 * (s0 + 2 * s1)) / 6
        self.P0 = np.vstack([np.zeros(3), np.cumsum(seg0, axis=0)])
        self.P1 = np.vstack([np.zeros(3), np.cumsum(seg1, axis=0)])

    def covers(self, t0_us: int, t1_us: int) -> bool:
        return len(self.t) >= 2 and self.t[0] <= t0_us and t1_us <= self.t[-1]

    def _A(self, t_us):
        s = (np.asarray(t_us, dtype=np.int64) - self.t[0]) * 1e-6
        k = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2)
        s0, s1 = self.s[k], self.s[k + 1]
        a0, a1 = self.a[k], self.a[k + 1]
        slope = (a1 - a0) / (s1 - s0)[..., None]
        s_, s0_ = s[..., None], s0[..., None]
        h = s_ - s0_
        # partial segment from s0 to s
        A0 = self.P0[k] + a0 * h + 0.5 * slope * h * h
        A1 = self.P1[k] + a0 * (s_ * s_ - s0_ * s0_) / 2 + slope * (s_ ** 3 / 3 - s0_ * s_ * s_ / 2 + s0_ ** 3 / 6)
        return A0, A1, s_

    def first_moment_from(self, t0_us, t1_us):
        """int_{t0}^{t1} (s - t0) a(s) ds (vectorized over time arrays)."""
        A0a, A1a, sa = self._A(t0_us)
        A0b, A1b, _ = self._A(t1_us)
        return (A1b - A1a) - sa * (A0b - A0a)

    def first_moment_to(self, t0_us, t1_us):
        """int_{t0}^{t1} (t1 - s) a(s) ds, the double integral of a."""
        A0a, A1a, _ = self._A(t0_us)
        A0b, A1b, sb = self._A(t1_us)
        return sb * (A0b - A0a) - (A1b - A1a)


def adaptive_trigger(imu: ImuIntegrator, times, estimates, i: int, Delta: float,
                     W_max: int, min_start: int = 2) -> tuple[bool, list]:
    """Compare estimate i against IMU predictions from lags j = 1..W_max.

    Velocity at node i-j comes from the chord (i-2j -> i-j) corrected by the
    IMU; the position is then carried forward to t_i with the double integral.
    A lag violates when the deviation norm is strictly above Delta. On a
    violation the window runs from the largest violating lag to i.
    """
    j = np.arange(1, W_max + 1)
    j = j[(i - 2 * j >= 0) & (i - j >= min_start)]
    if len(j) == 0:
        return False, []
    times = np.asarray(times, dtype=np.int64)
    est = np.asarray(estimates, dtype=float)
    a, b = i - 2 * j, i - j
    ta, tb, ti = times[a], times[b], np.full(len(j), times[i])
    ok = (ta >= imu.t[0]) & (ti <= imu.t[-1])
    if not ok.any():
        return False, []
    j, a, b, ta, tb, ti = j[ok], a[ok], b[ok], ta[ok], tb[ok], ti[ok]
    # prefix integrals at every endpoint in one pass
    m = len(j)
    A0, A1, s = imu._A(np.concatenate([ta, tb, ti[:1]]))
    A0a, A0b, A0i = A0[:m], A0[m:2 * m], A0[2 * m:]
    A1a, A1b, A1i = A1[:m], A1[m:2 * m], A1[2 * m:]
    sa, si = s[:m], s[2 * m:]
    from_ab = (A1b - A1a) - sa * (A0b - A0a)  # int_{ta}^{tb} (s - ta) a(s) ds
    to_bi = si * (A0i - A0b) - (A1i - A1b)  # int_{tb}^{ti} (ti - s) a(s) ds
    T1 = ((tb - ta) * 1e-6)[:, None]
    v_b = (est[b] - est[a] + from_ab) / T1
    pred = est[b] + v_b * ((ti - tb) * 1e-6)[:, None] + to_bi
    bad = np.linalg.norm(pred - est[i], axis=1) > Delta
    if not bad.any():
        return False, []
    worst = int(j[bad].max())
    return True, list(range(i - worst, i + 1))


# ----------------------------------------------------------------------------
# local window optimization


def local_optimize(factors: list, initial: dict, fixed: dict, relin: Optional[RelinState] = None,
                   max_relin: int = 2) -> IncrementalSolver:
    """Joint solve over the window nodes in `initial`; `fixed` nodes hold the gauge."""
    solver = IncrementalSolver(relin or RelinState(), fixed)
    solver.update(factors, initial)
    for _ in range(max_relin):
        if not solver.check_relin():
            break
    return solver


# ----------------------------------------------------------------------------
# engine


@dataclass
class GajoParams:
    Delta: float = 0.05
    W_max: int = 20
    relin_delta: float = 0.01
    relin_L_T: int = 10
    relin_Delta: float = 0.05
    max_relin: int = 2
    session_span: int = 30  # nodes before a session is rebuilt from scratch
    use_trigger: bool = True


@dataclass
class GajoStats:
    nodes: int = 0
    triggers: int = 0
    full_updates: int = 0
    incremental_updates: int = 0
    relinearizations: int = 0
    diverged: int = 0
    prior_factors: int = 0
    et_factors: int = 0
    rt_factors: int = 0
    windows: list = field(default_factory=list)


class Gajo:
    """Inter-SAE tracker plus motion-triggered local optimizer for one pipeline."""

    def __init__(self, K: CameraIntrinsics, extrinsics: RigidTransform, noise: NoiseModel = NoiseModel(),
                 pipeline: str = "fused", params: GajoParams = GajoParams(), imu: Optional[ImuIntegrator] = None):
        if pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {pipeline!r}")
        self.K, self.extrinsics, self.noise = K, extrinsics, noise
        self.pipeline, self.terms = pipeline, PIPELINES[pipeline]
        self.params = params
        self.imu = imu
        self.nodes: list[StateNode] = []
        self.factors: list[list] = []  # per node
        self.stats = GajoStats()
        self._session: Optional[IncrementalSolver] = None
        self._session_base = -1
        self._session_top = -1
        # test hook: called as corrupt(i, estimate) -> estimate after the instant solve
        self.corrupt: Optional[Callable] = None

    @property
    def started(self) -> bool:
        return bool(self.nodes)

    def estimates(self) -> np.ndarray:
        return np.array([n.t_ED for n in self.nodes]) if self.nodes else np.zeros((0, 3))

    def _bootstrap_value(self, bundle):
        if bundle is None or bundle.P_E is None:
            return None
        if self.pipeline == "event_only" and len(self.nodes) == 1:
            # no radar motion cue: start from rest
            return self.nodes[0].t_ED.copy()
        return np.asarray(bundle.P_E, dtype=float).copy()

    def step(self, t: int, bundle: Optional[MeasurementBundle]) -> Optional[StateNode]:
        """Add the node for time t; returns it (None until the first bundle)."""
        i = len(self.nodes)
        if i == 0 and (bundle is None or bundle.coast_only):
            return None
        if bundle is not None and bundle.coast_only:
            bundle = None
        fs = build_factors(i, bundle, self.K, self.extrinsics, self.noise, self.terms)
        self.factors.append(fs)
        for f in fs:
            if isinstance(f, PriorFactor):
                self.stats.prior_factors += 1
            elif isinstance(f, ETFactor):
                self.stats.et_factors += 1
            else:
                self.stats.rt_factors += 1

        diverged = False
        if i < 2:
            est = self._bootstrap_value(bundle)
            if est is None:
                est = self.nodes[-1].t_ED.copy()
        else:
            prior = prior_predict(self.nodes[-1].t_ED, self.nodes[-2].t_ED)
            ctx = {i - 1: self.nodes[-1].t_ED, i - 2: self.nodes[-2].t_ED}
            try:
                est, _ = inter_sae_track(_rekey(fs, i), prior, ctx)
            except Diverged:
                est, diverged = prior, True
                self.stats.diverged += 1
        if self.corrupt is not None:
            est = np.asarray(self.corrupt(i, est), dtype=float)
        node = StateNode(int(t), est.copy(), est.copy(), diverged=diverged)
        self.nodes.append(node)
        self.stats.nodes += 1

        if self.params.use_trigger and self.imu is not None and i >= 4:
            times = [n.t for n in self.nodes]
            ests = [n.t_ED for n in self.nodes]
            trig, window = adaptive_trigger(self.imu, times, ests, i, self.params.Delta, self.params.W_max)
            if trig:
                self.stats.triggers += 1
                self.stats.windows.append(window)
                self._optimize_window(window)
        return node

    def _optimize_window(self, window: list) -> None:
        s, i = window[0], window[-1]
        p = self.params
        reuse = (self._session is not None and s >= self._session_base
                 and i - self._session_base + 1 <= p.session_span)
        try:
            if reuse:
                sol = self._session
                for k in range(self._session_top + 1, i + 1):
                    sol.update(self.factors[k], {k: self.nodes[k].t_ED})
                    self._count(sol, after=True)
            else:
                fixed = {s - 1: self.nodes[s - 1].t_ED.copy(), s - 2: self.nodes[s - 2].t_ED.copy()}
                init = {k: self.nodes[k].t_ED.copy() for k in range(s, i + 1)}
                fs = [f for k in range(s, i + 1) for f in self.factors[k]]
                sol = IncrementalSolver(RelinState(p.relin_delta, p.relin_L_T, p.relin_Delta), fixed)
                sol.update(fs, init)
                for _ in range(p.max_relin):
                    if not sol.check_relin():
                        break
                self._session, self._session_base = sol, s
                self._count(sol, after=True)
        except SolverFailure:
            self._session = None
            return
        self._session_top = i
        for k in window:
            node = self.nodes[k]
            node.t_ED = sol.estimate[k].copy()
            node.linearization_point = sol.lin[k].copy()
            node.refined = True

    def _count(self, sol: IncrementalSolver, after: bool) -> None:
        # fold solver counters into the engine totals without double counting
        st = sol.stats
        seen = getattr(sol, "_reported", (0, 0, 0))
        self.stats.full_updates += st.full_updates - seen[0]
        self.stats.incremental_updates += st.incremental_updates - seen[1]
        self.stats.relinearizations += st.relinearizations - seen[2]
        sol._reported = (st.full_updates, st.incremental_updates, st.relinearizations)


def bundle_from_cct(b, t: int) -> Optional[MeasurementBundle]:
    if b is None:
        return None
    return MeasurementBundle(t, b.x, b.D, b.direction, b.U_E, b.P_E)


def run_gajo(K, extrinsics, bundles: list, times: list, noise: NoiseModel = NoiseModel(),
             pipeline: str = "fused", params: GajoParams = GajoParams(), imu: Optional[ImuIntegrator] = None):
    """Feed one bundle (or None) per frame time; returns (engine, per-frame step seconds)."""
    g = Gajo(K, extrinsics, noise, pipeline, params, imu)
    lat = []
    for t, b in zip(times, bundles):
        t0 = time.perf_counter()
        g.step(t, b)
        lat.append(time.perf_counter() - t0)
    return g, lat
