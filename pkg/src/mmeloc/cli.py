"""Command-line entry point: gen, run, metrics, bench-solver."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, InvalidConfig, MmeLocError, PipelineError
from .harness import (RunConfig, bench_solver, compute_metrics, export_results, read_estimates_csv,
                      run_scenario, summary_table)
from .sim import ScenarioConfig, generate, read_truth_csv, save_scenario

log = logging.getLogger("mmeloc")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def cmd_gen(args) -> int:
    raw = _load_json(args.config)
    out = args.out or raw.pop("output_dir", None) or f"scenario_{raw.get('seed', 42)}"
    raw.pop("output_dir", None)
    try:
        cfg = ScenarioConfig.from_dict(raw)
        sc = generate(cfg)
    except InvalidConfig as exc:
        raise ConfigError(str(exc)) from exc
    except MmeLocError as exc:
        raise PipelineError("generate", exc) from exc
    save_scenario(sc, out)
    print(f"wrote {out}: {len(sc.events.t)} events, {len(sc.radar)} radar frames, {len(sc.imu.t)} imu samples")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.out:
        cfg.output_dir = args.out
    rep = run_scenario(cfg)
    sys.stdout.write(summary_table(rep))
    return EXIT_OK


def cmd_metrics(args) -> int:
    est = read_estimates_csv(args.est)
    truth = read_truth_csv(args.truth)
    try:
        rep = compute_metrics(est, truth)
    except MmeLocError as exc:
        raise PipelineError("metrics", exc) from exc
    if args.out:
        export_results(rep, args.out)
    sys.stdout.write(summary_table(rep))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.nodes < 2:
        raise ConfigError("--nodes must be >= 2")
    res = bench_solver(args.nodes, args.reps, args.seed)
    print(json.dumps(res, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmeloc", description="Event camera and mmWave radar drone localization")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="synthesize a scenario directory")
    p.add_argument("--config", required=True, help="scenario JSON (ScenarioConfig fields)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("run", help="run a pipeline over a scenario")
    p.add_argument("--config", required=True, help="run JSON")
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("metrics", help="score an est.csv against truth.csv")
    p.add_argument("--est", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", help="write metrics files here")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("bench-solver", help="incremental vs batch solver timing")
    p.add_argument("--nodes", type=int, default=200)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except MmeLocError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
