"""Command line entry point: run, simulate, evaluate and plot."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, parse_overrides
from .dataset import DatasetError, read_tum
from .evaluate import EvaluationError, end_drift, evaluate_ate

log = logging.getLogger("livo")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(parse_overrides(args.set))


def cmd_run(args) -> int:
    from .diagnostics import emit_diagnostics
    from .pipeline import run_odometry

    cfg = _config(args)
    result = run_odometry(args.dataset, cfg, args.out, overlay=args.overlay,
                          max_frames=args.max_frames)
    if not args.no_plots:
        emit_diagnostics(result.out_dir, args.dataset)
    m = result.metrics
    print(f"frames {m['frames']}  fps {m['fps']:.1f}  cloud points {m['cloud_points']}")
    for key in ("ate_rmse", "end_drift", "max_drift", "exposure_rmse"):
        if key in m:
            print(f"{key} {m[key]:.6f}")
    print(f"outputs in {result.out_dir}")
    return 0


def cmd_simulate(args) -> int:
    from .sim.scenarios import SimConfig, write_dataset

    cfg = SimConfig(scenario=args.scenario, seed=args.seed, duration=args.duration,
                    noise=not args.no_noise, exposure_amplitude=args.exposure_amplitude,
                    exposure_period=args.exposure_period, lidar_cols=args.lidar_cols,
                    lidar_rows=args.lidar_rows)
    summary = write_dataset(args.out, cfg)
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0


def cmd_evaluate(args) -> int:
    t_est, R_est, p_est = read_tum(Path(args.estimate))
    t_gt, R_gt, p_gt = read_tum(Path(args.truth))
    ate = evaluate_ate(t_est, p_est, t_gt, p_gt, args.max_dt)
    drift = end_drift(t_est, R_est, p_est, t_gt, R_gt, p_gt, args.max_dt)
    print(f"matched {ate.matched}")
    print(f"ate_rmse {ate.rmse:.6f}")
    print(f"end_drift {drift:.6f}")
    return 0


def cmd_plot(args) -> int:
    from .diagnostics import emit_diagnostics

    for path in emit_diagnostics(args.run_dir, args.dataset, args.out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="livo", description="LiDAR-inertial-visual odometry")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="process a dataset directory")
    r.add_argument("dataset", help="dataset directory")
    r.add_argument("--out", default=None, help="output directory (default: <dataset>/run)")
    r.add_argument("--config", default=None, help="key = value config file")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    r.add_argument("--overlay", action="store_true", help="write per-frame overlay images")
    r.add_argument("--max-frames", type=int, default=None)
    r.add_argument("--no-plots", action="store_true", help="skip diagnostic plots")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("simulate", help="write a synthetic dataset")
    s.add_argument("out", help="dataset directory to create")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--scenario", default="loop", choices=["loop", "exposure", "wall", "static"])
    s.add_argument("--duration", type=float, default=None)
    s.add_argument("--no-noise", action="store_true", help="noise-free sensors")
    s.add_argument("--exposure-amplitude", type=float, default=None)
    s.add_argument("--exposure-period", type=float, default=None)
    s.add_argument("--lidar-cols", type=int, default=64)
    s.add_argument("--lidar-rows", type=int, default=48)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="ATE and end drift of a TUM trajectory")
    e.add_argument("estimate")
    e.add_argument("truth")
    e.add_argument("--max-dt", type=float, default=0.005, help="association window [s]")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("plot", help="diagnostic CSVs and plots for a run directory")
    g.add_argument("run_dir")
    g.add_argument("--dataset", default=None, help="dataset directory for exposure truth")
    g.add_argument("--out", default=None, help="output directory (default: <run>/diagnostics)")
    g.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, EvaluationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
