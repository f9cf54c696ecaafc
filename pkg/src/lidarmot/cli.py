"""Command-line entry points: simulate, run, eval, plot-data.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure inside the pipeline.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .config import (
    ConfigError,
    load_run_config,
    load_simulate_config,
    _parse_scalar,
)
from .dataset import SequenceError, read_sequence, write_sequence
from .geometry import read_tum
from .metrics import MetricsError, evaluate
from .pipeline import run_pipeline, timing_report, write_timing_summary
from .simulate import scene_setup, simulate_sequence

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _parse_overrides(items: list[str] | None) -> dict:
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = _parse_scalar(value)
    return overrides


def _cmd_simulate(args: argparse.Namespace) -> int:
    overrides = _parse_overrides(args.set)
    config = load_simulate_config(args.config, overrides)
    if args.scene:
        config.scene = args.scene
    if args.frames:
        config.frames = args.frames
    if args.seed is not None:
        config.seed = args.seed
    world, ego = scene_setup(config.scene, config.ego_speed)
    world.validate_motion(config.frames, config.scanner.frame_period, config.max_body_speed)
    sequence = simulate_sequence(
        world,
        ego,
        config.frames,
        config.scanner,
        config.box_noise,
        seed=config.seed,
    )
    write_sequence(args.out, sequence)
    print(f"wrote {config.frames} frames of scene '{config.scene}' to {args.out}")
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    overrides = _parse_overrides(args.set)
    config = load_run_config(args.config, overrides)
    if args.seed is not None:
        config.seed = args.seed
    sequence = read_sequence(args.sequence)
    report = run_pipeline(sequence, config, output_dir=args.out)
    write_timing_summary(report, os.path.join(args.out, "timing_summary.csv"))
    if report.failure_frame is not None:
        print(
            f"pipeline failed at frame {report.failure_frame}: {report.failure_reason}",
            file=sys.stderr,
        )
        return EXIT_NUMERICAL
    summary = timing_report(report)
    total_ms = sum(stats["mean_ms"] for stats in summary.values())
    print(f"processed {report.frames} frames, mean {total_ms:.1f} ms/frame")
    for name, stats in summary.items():
        print(f"  {name:16s} {stats['mean_ms']:7.2f} ms mean  {stats['p90_ms']:7.2f} ms p90")
    print(f"outputs in {args.out}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    est = read_tum(args.est)
    ref = read_tum(args.gt)
    metrics = evaluate(est, ref, mode=args.mode, time_tol=args.time_tol)
    units = metrics.units()
    payload = {
        "ate_rmse": metrics.ate_rmse,
        "rte": metrics.rte,
        "rre": metrics.rre,
        "matched_poses": metrics.matched_poses,
        "mode": metrics.mode,
        "units": units,
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        with open(args.out, "w") as handle:
            handle.write(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_plot_data(args: argparse.Namespace) -> int:
    run_dir = args.run
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, output in (("ego_odom", "ego_odom_path.csv"), ("ego_map", "ego_map_path.csv")):
        path = os.path.join(run_dir, f"{name}.tum")
        if not os.path.isfile(path):
            continue
        rows = read_tum(path)
        out_path = os.path.join(out_dir, output)
        with open(out_path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["t", "x", "y", "z"])
            for row in rows:
                writer.writerow([f"{v:.9f}" for v in row[:4]])
        written.append(out_path)
    objects_dir = os.path.join(run_dir, "objects")
    series = []
    if os.path.isdir(objects_dir):
        for fname in sorted(os.listdir(objects_dir)):
            if not fname.endswith(".tum"):
                continue
            rows = read_tum(os.path.join(objects_dir, fname))
            series.append(
                {
                    "name": fname[: -len(".tum")],
                    "t": [float(r[0]) for r in rows],
                    "x": [float(r[1]) for r in rows],
                    "y": [float(r[2]) for r in rows],
                    "z": [float(r[3]) for r in rows],
                }
            )
    if series:
        out_path = os.path.join(out_dir, "object_paths.json")
        with open(out_path, "w") as handle:
            json.dump(series, handle, indent=1)
        written.append(out_path)
    timing_path = os.path.join(run_dir, "timing.csv")
    if os.path.isfile(timing_path):
        out_path = os.path.join(out_dir, "timing_per_frame.csv")
        with open(timing_path) as src, open(out_path, "w") as dst:
            dst.write(src.read())
        written.append(out_path)
    if not written:
        raise SequenceError(f"no plottable outputs found under {run_dir}")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidarmot",
        description="Lidar odometry, multi-object tracking, and 4D semantic mapping",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic sequence")
    sim.add_argument("--scene", choices=["corridor", "room", "crossing", "unknown-mover"])
    sim.add_argument("--out", required=True, help="output sequence directory")
    sim.add_argument("--frames", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--config", help="flat key = value config file")
    sim.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    sim.set_defaults(func=_cmd_simulate)

    run = sub.add_parser("run", help="run the pipeline on a sequence")
    run.add_argument("--sequence", required=True, help="sequence directory")
    run.add_argument("--out", required=True, help="run output directory")
    run.add_argument("--seed", type=int)
    run.add_argument("--config", help="flat key = value config file")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    run.set_defaults(func=_cmd_run)

    ev = sub.add_parser("eval", help="compare a trajectory against ground truth")
    ev.add_argument("--est", required=True, help="estimated trajectory (TUM)")
    ev.add_argument("--gt", required=True, help="reference trajectory (TUM)")
    ev.add_argument("--mode", choices=["ego", "object"], default="ego")
    ev.add_argument("--time-tol", type=float, default=1e-6)
    ev.add_argument("--out", help="also write the metrics JSON here")
    ev.set_defaults(func=_cmd_eval)

    plot = sub.add_parser("plot-data", help="emit plot-ready CSV/JSON series from a run")
    plot.add_argument("--run", required=True, help="run output directory")
    plot.add_argument("--out", required=True, help="directory for plot data")
    plot.set_defaults(func=_cmd_plot_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SequenceError, FileNotFoundError, MetricsError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
