"""Command-line entry point: ``scanweave run | simulate | evaluate``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import datasets, metrics
from . import simulation as sim
from .odometry import Odometry, PipelineConfig

log = logging.getLogger("scanweave")

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2

# flag name -> PipelineConfig field
PIPELINE_FLAGS = {
    "v-map": "v_map",
    "v-icp": "v_icp",
    "d-max": "d_max",
    "tau": "tau",
    "conv-eps": "conv_eps",
    "max-icp-iters": "max_icp_iters",
    "min-corrs": "min_corrs",
    "kappa": "kappa",
    "gamma": "gamma",
    "max-range": "max_lidar_range",
    "lm-iters": "lm_iters",
}
EXTRA_KEYS = {"synth-timestamps": "synth_timestamps", "rte-step": "rte_step", "seed": "seed"}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys accept ``-`` or ``_``."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {ln}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key not in PIPELINE_FLAGS and key not in EXTRA_KEYS:
            raise ConfigError(f"config line {ln}: unknown key {key!r}")
        out[key] = val.strip("\"'")
    return out


def _coerce(key: str, value):
    if key == "synth-timestamps":
        if isinstance(value, bool):
            return value
        v = str(value).lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    integral = key in ("min-corrs", "lm-iters", "max-icp-iters", "rte-step", "seed")
    try:
        return int(value) if integral else float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: invalid value {value!r}") from None


def effective_settings(args) -> dict:
    """Merge defaults, the optional config file, and explicit flags (highest wins)."""
    settings = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        settings.update(parse_config_text(text))
    for key in (*PIPELINE_FLAGS, *EXTRA_KEYS):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            settings[key] = val
    return {k: _coerce(k, v) for k, v in settings.items()}


def pipeline_config(settings: dict) -> PipelineConfig:
    kw = {PIPELINE_FLAGS[k]: v for k, v in settings.items() if k in PIPELINE_FLAGS}
    try:
        return PipelineConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _add_pipeline_flags(p: argparse.ArgumentParser):
    defaults = {f.name: f.default for f in fields(PipelineConfig)}
    g = p.add_argument_group("pipeline parameters")
    for flag, name in PIPELINE_FLAGS.items():
        typ = int if isinstance(defaults[name], int) else float
        shown = "max-range / 3" if name == "gamma" else defaults[name]
        g.add_argument(f"--{flag}", type=typ, default=None, help=f"default: {shown}")
    p.add_argument("--synth-timestamps", action="store_const", const=True, default=None,
                   help="derive per-point sweep times from azimuth when scans lack them")
    p.add_argument("--config", help="key = value file; explicit flags take precedence")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scanweave", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="estimate a trajectory for a scan directory")
    run.add_argument("input", help="directory of .bin or .csv scans (optional poses.txt)")
    run.add_argument("output", help="directory for trajectory.txt and report.json")
    _add_pipeline_flags(run)
    run.add_argument("--rte-step", type=int, default=None)
    run.add_argument("--lengths", default=None,
                     help="comma-separated RTE lengths when poses.txt exists (default: KITTI)")
    run.add_argument("--seed", type=int, default=None, help="recorded in the report")
    run.add_argument("-q", "--quiet", action="store_true", help="no per-frame progress")

    simulate = sub.add_parser("simulate", help="write a synthetic CSV sequence")
    simulate.add_argument("output")
    simulate.add_argument("--frames", type=int, default=200)
    simulate.add_argument("--speed", type=float, default=10.0, help="m/s")
    simulate.add_argument("--dt", type=float, default=0.1, help="seconds per frame")
    simulate.add_argument("--rays", type=int, default=64 * 360)
    simulate.add_argument("--noise", type=float, default=0.02, help="range noise sigma in meters")
    simulate.add_argument("--max-range", type=float, default=100.0)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--ramp", type=float, default=1.0,
                          help="seconds to accelerate from rest to --speed (0: start at speed)")
    simulate.add_argument("--straight", action="store_true", help="no turns")
    simulate.add_argument("--motion-distortion", action="store_true")

    ev = sub.add_parser("evaluate", help="relative translational error of a trajectory")
    ev.add_argument("estimate")
    ev.add_argument("ground_truth")
    ev.add_argument("--lengths", default=None, help="comma-separated meters (default: KITTI)")
    ev.add_argument("--rte-step", type=int, default=1)
    ev.add_argument("--output", default=None, help="directory for rte.json")
    ev.add_argument("--name", default="sequence", help="row label in the table")
    return parser


def _lengths(text):
    if text is None:
        return metrics.KITTI_LENGTHS
    try:
        out = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"invalid --lengths {text!r}") from None
    if not out or min(out) <= 0:
        raise ConfigError("--lengths must be positive")
    return out


def cmd_run(args) -> int:
    settings = effective_settings(args)
    cfg = pipeline_config(settings)
    step = settings.get("rte-step", 1)
    if step < 1:
        raise ConfigError("rte-step must be >= 1")
    lengths = _lengths(args.lengths)
    seq = datasets.read_sequence(args.input, cfg.max_lidar_range,
                                 settings.get("synth-timestamps", False))
    if seq.ground_truth is not None and len(seq.ground_truth) != len(seq.scans):
        raise datasets.FormatError(
            f"{datasets.POSES_FILE} has {len(seq.ground_truth)} rows for {len(seq.scans)} scans"
        )
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)

    odom = Odometry(cfg)
    n = len(seq.scans)
    for k in range(n):
        res = odom.process_frame(seq.scans[k])
        if res.degenerate:
            print(f"WARNING frame {k}: all {res.registrations_aborted} registrations aborted, "
                  "pose taken from motion prediction", file=sys.stderr)
        if not args.quiet:
            print(f"frame {k + 1}/{n} constraints={res.constraints_added} "
                  f"aborted={res.registrations_aborted} keyframes={len(odom.keyframes)} "
                  f"chi2={res.chi2:.6g}")

    traj = odom.trajectory()
    datasets.write_trajectory(traj, out / "trajectory.txt")
    report = {
        "config": cfg.to_dict(),
        "synth_timestamps": settings.get("synth-timestamps", False),
        "seed": settings.get("seed"),
        "input": str(args.input),
        "frames": n,
        "degenerate_frames": [r.node for r in odom.results if r.degenerate],
        "per_frame": [r.to_dict() for r in odom.results],
    }
    if seq.ground_truth is not None:
        rep = metrics.rte(traj, seq.ground_truth, lengths, step)
        report["rte"] = rep.to_dict()
        if not args.quiet:
            print(rep.table(Path(args.input).name), end="")
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.frames < 1 or args.rays < 1 or args.noise < 0 or args.dt <= 0 or args.ramp < 0:
        raise ConfigError("frames and rays must be positive, noise and ramp non-negative, dt positive")
    n = args.frames
    rates = np.zeros(max(n - 1, 0)) if args.straight else sim.turning_yaw_rates(n, args.dt, args.seed)
    traj = sim.scripted_trajectory(
        n, args.speed, args.dt, rates,
        wobble=(np.deg2rad(0.5), np.deg2rad(0.3), 0.03), seed=args.seed, ramp=args.ramp,
    )
    world = sim.city_world(traj, seed=args.seed)
    sensor = sim.SensorParams(args.rays, args.max_range, args.noise, args.seed)
    seq = sim.generate_sequence(world, traj, sensor, motion_distortion=args.motion_distortion)
    datasets.write_sequence(seq, args.output)
    print(f"wrote {n} scans to {args.output}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    est = datasets.read_trajectory(args.estimate)
    gt = datasets.read_trajectory(args.ground_truth)
    if len(est) != len(gt):
        raise datasets.FormatError(f"row count mismatch: {len(est)} estimated vs {len(gt)} ground truth")
    if args.rte_step < 1:
        raise ConfigError("--rte-step must be >= 1")
    rep = metrics.rte(est, gt, _lengths(args.lengths), args.rte_step)
    if rep.empty:
        print("WARNING: trajectory shorter than every segment length", file=sys.stderr)
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "rte.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    print(rep.table(args.name), end="")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "simulate": cmd_simulate, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
