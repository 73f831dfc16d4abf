"""Scenario runner, metrics and result export.

A run loads (or generates) a scenario directory, pushes it through the shared
CCT front end and one GAJO pipeline variant, and writes est.csv, metrics.json,
cdf.csv, latency.csv and summary.txt into the output directory.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .cct import CCTParams, filtering_metrics, run_cct
from .errors import (ConfigError, InsufficientOverlap, InvalidConfig, IoError, MmeLocError, PipelineError,
                     SchemaError)
from .events import FilterParams, GridParams, TrackerParams
from .gajo import PIPELINES, GajoParams, ImuIntegrator, NoiseModel, bundle_from_cct, run_gajo
from .isolver import LinearFactor, backsubstitute, incremental_update_factors, linearize, qr_factorize
from .sim import GroundTruthTrajectory, ScenarioConfig, generate, load_scenario, save_scenario

SCHEMA_VERSION = 1
LATENCY_KEYS = ("latency",)  # metrics.json sections that carry wall-clock values

_SECTIONS = {
    "noise": NoiseModel,
    "gajo": GajoParams,
    "cct": CCTParams,
    "filter": FilterParams,
    "grid": GridParams,
    "tracker": TrackerParams,
}


def max_workers() -> int:
    raw = os.environ.get("MMELOC_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


# ----------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    scenario: str  # scenario directory; generated from `generate` when absent
    pipeline: str = "fused"
    overrides: dict = field(default_factory=dict)  # {"gajo": {"Delta": 0.1}, ...}
    output_dir: str = "out"
    repetitions: int = 1
    generate: Optional[dict] = None  # ScenarioConfig fields used when `scenario` is missing

    def validate(self) -> None:
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}; expected one of {sorted(PIPELINES)}")
        if int(self.repetitions) < 1:
            raise ConfigError("repetitions must be >= 1")
        if not Path(self.scenario).exists() and self.generate is None:
            raise ConfigError(f"scenario directory {self.scenario} does not exist")
        for sec, vals in self.overrides.items():
            if sec not in _SECTIONS:
                raise ConfigError(f"unknown override section {sec!r}")
            names = {f.name for f in dataclasses.fields(_SECTIONS[sec])}
            bad = set(vals) - names
            if bad:
                raise ConfigError(f"unknown {sec} parameters {sorted(bad)}")
            self.params(sec)

    def params(self, section: str):
        vals = dict(self.overrides.get(section, {}))
        if section == "noise" and vals.get("Sigma_E") is not None:
            vals["Sigma_E"] = tuple(map(tuple, vals["Sigma_E"]))
        try:
            return _SECTIONS[section](**vals)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad {section} parameters: {exc}") from exc

    @classmethod
    def from_dict(cls, d: dict, base: Optional[Path] = None) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - names
        if bad:
            raise ConfigError(f"unknown run config keys {sorted(bad)}")
        if "scenario" not in d:
            raise ConfigError("run config needs a 'scenario' directory")
        d = dict(d)
        if base is not None:
            for k in ("scenario", "output_dir"):
                if k in d and not Path(d[k]).is_absolute():
                    d[k] = str(base / d[k])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"{path}: file not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, base=path.parent)


# ----------------------------------------------------------------------------
# metrics


@dataclass
class Estimates:
    t: np.ndarray  # µs
    position: np.ndarray  # (n, 3)
    refined: np.ndarray = None
    latency_us: np.ndarray = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        self.position = np.asarray(self.position, dtype=float).reshape(-1, 3)
        n = len(self.t)
        self.refined = np.zeros(n, bool) if self.refined is None else np.asarray(self.refined, bool)
        self.latency_us = np.zeros(n) if self.latency_us is None else np.asarray(self.latency_us, float)


@dataclass
class MetricsReport:
    pipeline: str = ""
    seed: Optional[int] = None
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    cdf_error: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cdf_fraction: np.ndarray = field(default_factory=lambda: np.zeros(0))
    filter: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    latency: dict = field(default_factory=dict)  # stage -> per-estimate µs array

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean()) if len(self.errors) else float("nan")

    @property
    def median_error(self) -> float:
        return float(np.median(self.errors)) if len(self.errors) else float("nan")

    @property
    def p95_error(self) -> float:
        return float(np.percentile(self.errors, 95)) if len(self.errors) else float("nan")

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.errors ** 2))) if len(self.errors) else float("nan")

    def latency_summary(self) -> dict:
        out = {}
        for k, v in self.latency.items():
            v = np.asarray(v, float)
            out[k] = {"mean_us": float(v.mean()) if len(v) else None,
                      "p95_us": float(np.percentile(v, 95)) if len(v) else None}
        return out

    def to_dict(self) -> dict:
        nan = lambda x: None if not np.isfinite(x) else x
        return {
            "schema_version": SCHEMA_VERSION,
            "pipeline": self.pipeline,
            "seed": self.seed,
            "n_estimates": int(len(self.errors)),
            "error_m": {"mean": nan(self.mean_error), "median": nan(self.median_error),
                        "p95": nan(self.p95_error), "rmse": nan(self.rmse)},
            "filter": {k: float(v) for k, v in self.filter.items()},
            "solver": {k: int(v) for k, v in self.solver.items()},
            "latency": self.latency_summary(),
        }


def error_cdf(errors) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF at the distinct error values; ends at fraction 1."""
    e = np.sort(np.asarray(errors, dtype=float))
    if len(e) == 0:
        return np.zeros(0), np.zeros(0)
    u = np.unique(e)
    return u, np.searchsorted(e, u, side="right") / len(e)


def recall_precision(is_drone, kept) -> tuple[float, float]:
    is_drone = np.asarray(is_drone, bool)
    kept = np.asarray(kept, bool)
    tp = int((is_drone & kept).sum())
    pos, sel = int(is_drone.sum()), int(kept.sum())
    return (tp / pos if pos else 0.0), (tp / sel if sel else 0.0)


def compute_metrics(est: Estimates, truth: GroundTruthTrajectory, labels: Optional[dict] = None,
                    min_overlap: float = 0.9) -> MetricsReport:
    """Per-estimate error against interpolated truth plus labelled recall/precision.

    `labels` maps a modality name to (is_drone, kept) boolean arrays. An
    estimate counts as covered when the nearest truth sample lies within half
    the median estimate period.
    """
    n = len(est.t)
    if n == 0 or len(truth.t) == 0:
        raise InsufficientOverlap("no estimates or no truth samples")
    period = float(np.median(np.diff(est.t))) if n > 1 else float("inf")
    j = np.clip(np.searchsorted(truth.t, est.t), 1, max(len(truth.t) - 1, 1))
    lo = truth.t[j - 1] if len(truth.t) > 1 else truth.t[0]
    hi = truth.t[j] if len(truth.t) > 1 else truth.t[0]
    gap = np.minimum(np.abs(est.t - lo), np.abs(est.t - hi))
    inside = (est.t >= truth.t[0]) & (est.t <= truth.t[-1])
    covered = inside & (gap <= 0.5 * period)
    if covered.mean() < min_overlap:
        raise InsufficientOverlap(f"only {covered.mean():.1%} of estimates overlap the truth")
    err = np.linalg.norm(est.position[covered] - truth.interpolate(est.t[covered]), axis=1)
    ce, cf = error_cdf(err)
    rep = MetricsReport(errors=err, t=est.t[covered], cdf_error=ce, cdf_fraction=cf)
    for name, (is_drone, kept) in (labels or {}).items():
        r, p = recall_precision(is_drone, kept)
        rep.filter[f"{name}_recall"] = r
        rep.filter[f"{name}_precision"] = p
    rep.latency = {"end_to_end": est.latency_us[covered]}
    return rep


# ----------------------------------------------------------------------------
# export


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(df: pd.DataFrame) -> str:
    buf = io.StringIO()
    df.to_csv(buf, index=False, float_format="%.17g", lineterminator="\n")
    return buf.getvalue()


def summary_table(rep: MetricsReport) -> str:
    d = rep.to_dict()
    rows = [("pipeline", d["pipeline"]), ("estimates", d["n_estimates"])]
    rows += [(f"error {k} [m]", "-" if v is None else f"{v:.4f}") for k, v in d["error_m"].items()]
    rows += [(k, f"{v:.3f}") for k, v in d["filter"].items()]
    rows += [(k, str(v)) for k, v in d["solver"].items()]
    for k, v in d["latency"].items():
        if v["mean_us"] is not None:
            rows.append((f"latency {k} mean/p95 [us]", f"{v['mean_us']:.0f} / {v['p95_us']:.0f}"))
    w = max(len(r[0]) for r in rows)
    return "\n".join(f"{a:<{w}}  {b}" for a, b in rows) + "\n"


def export_results(rep: MetricsReport, out_dir, est: Optional[Estimates] = None) -> list:
    """Write metrics.json, cdf.csv, latency.csv, summary.txt (and est.csv); returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = []
        p = out / "metrics.json"
        _atomic_write(p, json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
        files.append(p)
        p = out / "cdf.csv"
        _atomic_write(p, _csv(pd.DataFrame({"error_m": rep.cdf_error, "fraction": rep.cdf_fraction})))
        files.append(p)
        lat = {"t_us": np.asarray(rep.t, np.int64)}
        for k, v in rep.latency.items():
            lat[f"{k}_us"] = np.asarray(v, float)
        p = out / "latency.csv"
        _atomic_write(p, _csv(pd.DataFrame(lat)))
        files.append(p)
        p = out / "summary.txt"
        _atomic_write(p, summary_table(rep))
        files.append(p)
        if est is not None:
            p = out / "est.csv"
            _atomic_write(p, _csv(pd.DataFrame({
                "t_us": est.t, "px": est.position[:, 0], "py": est.position[:, 1], "pz": est.position[:, 2],
                "refined_flag": est.refined.astype(int), "latency_us": est.latency_us})))
            files.append(p)
    except OSError as exc:
        raise IoError(f"cannot write results to {out}: {exc}") from exc
    return files


def read_estimates_csv(path) -> Estimates:
    path = Path(path)
    if not path.exists():
        raise SchemaError(path, "file not found")
    df = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in ("t_us", "px", "py", "pz") if c not in df.columns]
    if missing:
        raise SchemaError(path, f"missing columns {missing}")
    return Estimates(df["t_us"].to_numpy(np.int64), df[["px", "py", "pz"]].to_numpy(float),
                     df["refined_flag"].to_numpy(bool) if "refined_flag" in df else None,
                     df["latency_us"].to_numpy(float) if "latency_us" in df else None)


# ----------------------------------------------------------------------------
# runner


@dataclass
class RunResult:
    estimates: Estimates
    report: MetricsReport
    engine: object  # the Gajo instance


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except PipelineError:
        raise
    except MmeLocError as exc:
        raise PipelineError(name, exc) from exc
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        raise PipelineError(name, exc) from exc


def obtain_scenario(cfg: RunConfig):
    d = Path(cfg.scenario)
    if not (d / "scenario.json").exists():
        if cfg.generate is None:
            raise SchemaError(d / "scenario.json", "file not found")
        try:
            sc_cfg = ScenarioConfig.from_dict(cfg.generate)
        except (InvalidConfig, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        sc = _stage("generate", generate, sc_cfg)
        save_scenario(sc, d)
    return load_scenario(d)


def process_scenario(sc, cfg: RunConfig) -> RunResult:
    """Run CCT and one GAJO pipeline over a loaded scenario."""
    K, ext = sc.calibration.intrinsics, sc.calibration.radar_to_camera
    results, kept = _stage("track", run_cct, sc.events, sc.radar, K, ext,
                           params=cfg.params("cct"), fparams=cfg.params("filter"),
                           grid=cfg.params("grid"), tparams=cfg.params("tracker"),
                           chirp=sc.config.chirp_config() if sc.config.raw_if else None)
    times = [r.t for r in results]
    bundles = [bundle_from_cct(r.bundle, r.t) for r in results]
    imu = ImuIntegrator(sc.imu.t, sc.imu.acc) if len(sc.imu.t) > 1 else None
    engine, lat = _stage("fuse", run_gajo, K, ext, bundles, times, cfg.params("noise"), cfg.pipeline,
                         cfg.params("gajo"), imu)

    cct_us = {r.t: r.latency_us for r in results}
    gajo_us = {t: s * 1e6 for t, s in zip(times, lat)}
    nt = np.array([n.t for n in engine.nodes], dtype=np.int64)
    c = np.array([cct_us[t] for t in nt]) if len(nt) else np.zeros(0)
    g = np.array([gajo_us[t] for t in nt]) if len(nt) else np.zeros(0)
    est = Estimates(nt, engine.estimates(), np.array([n.refined for n in engine.nodes], bool), c + g)

    labels = {"event_stream": (sc.events.label == 1, kept)}
    rep = _stage("metrics", compute_metrics, est, sc.truth, labels)
    rep.pipeline, rep.seed = cfg.pipeline, sc.config.seed
    rep.filter.update(filtering_metrics(results, sc.radar, sc.truth, K))
    st = engine.stats
    rep.solver = {"full_updates": st.full_updates, "incremental_updates": st.incremental_updates,
                  "relinearizations": st.relinearizations, "triggers": st.triggers, "diverged": st.diverged,
                  "prior_factors": st.prior_factors, "et_factors": st.et_factors, "rt_factors": st.rt_factors}
    keep = np.isin(nt, rep.t)
    rep.latency = {"cct": c[keep], "gajo": g[keep], "end_to_end": (c + g)[keep]}
    return RunResult(est, rep, engine)


def run_scenario(cfg: RunConfig, write: bool = True) -> MetricsReport:
    """Load or generate the scenario, run every repetition, export the first."""
    cfg.validate()
    sc = obtain_scenario(cfg)
    reps = int(cfg.repetitions)
    if reps == 1:
        runs = [process_scenario(sc, cfg)]
    else:
        with ThreadPoolExecutor(max_workers=min(reps, max_workers())) as pool:
            runs = list(pool.map(lambda _: process_scenario(sc, cfg), range(reps)))
    first = runs[0]
    if reps > 1:
        # results are deterministic; latency samples pool over repetitions
        for k in first.report.latency:
            first.report.latency[k] = np.concatenate([r.report.latency[k] for r in runs])
    if write:
        export_results(first.report, cfg.output_dir, first.estimates)
    return first.report


# ----------------------------------------------------------------------------
# solver benchmark


def _chain_problem(n_nodes: int, seed: int):
    """Random-walk chain with odometry and sparse absolute factors."""
    rng = np.random.default_rng(seed)
    truth = np.cumsum(rng.normal(0, 1, (n_nodes, 3)), axis=0)
    factors = [LinearFactor((0,), [np.eye(3)], truth[0] + rng.normal(0, 0.1, 3), 0.1)]
    for k in range(1, n_nodes):
        factors.append(LinearFactor((k - 1, k), [-np.eye(3), np.eye(3)],
                                    truth[k] - truth[k - 1] + rng.normal(0, 0.05, 3), 0.05))
        if k % 5 == 0:
            factors.append(LinearFactor((k,), [np.eye(3)], truth[k] + rng.normal(0, 0.2, 3), 0.2))
    values = {k: truth[k] + rng.normal(0, 0.01, 3) for k in range(n_nodes)}
    return factors, values


def bench_solver(n_nodes: int = 200, reps: int = 20, seed: int = 0) -> dict:
    """Mean wall time of one incremental step vs a fresh factorization on an n-node chain.

    Each repetition appends one node. The incremental path folds its factors
    into the running R; the batch path relinearizes and refactors everything.
    """
    factors, values = _chain_problem(n_nodes + reps + 1, seed)
    active = [f for f in factors if max(f.keys) < n_nodes]
    sq = qr_factorize(linearize(active, values))
    full, inc = [], []
    for r in range(-1, reps):  # r = -1 warms up compiled kernels
        new = [f for f in factors if max(f.keys) == n_nodes + r + 1]
        active += new
        t0 = time.perf_counter()
        incremental_update_factors(sq, new, values)
        backsubstitute(sq)
        inc.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        backsubstitute(qr_factorize(linearize(active, values)))
        full.append(time.perf_counter() - t0)
    full, inc = full[1:], inc[1:]
    return {"nodes": n_nodes, "reps": reps, "full_mean_s": float(np.mean(full)),
            "incremental_mean_s": float(np.mean(inc)),
            "ratio": float(np.mean(inc) / np.mean(full))}
