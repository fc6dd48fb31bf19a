"""Command-line front end: ``rgbdslam {track,slam,ablate,render,evaluate}``.

Exit codes: 0 success, 2 tracking lost, 3 configuration error, 4 I/O error.
Set ``RGBDSLAM_VERBOSE=1`` to mirror the diagnostics stream on stderr and
``RGBDSLAM_LOG=DEBUG`` (or INFO, WARNING) to change the log level.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Iterator

import yaml

from .config import ConfigError, RunConfig, dump_config, load_config
from .dataset import (
    DatasetError,
    TrajectoryParseError,
    export_ply,
    load_frame,
    load_sequence,
    poses_to_records,
    read_trajectory,
    write_trajectory,
)
from .evaluation import AblationSequence, EvaluationError, compute_ate, run_ablation
from .image import Frame
from .posegraph import write_g2o
from .se3 import PinholeIntrinsics
from .synthetic import DegenerateSceneError, NoiseModel, render_sequence, scene_by_name
from .system import SlamResult, SlamSystem
from .tracking import TrackingLostError

EXIT_OK, EXIT_LOST, EXIT_CONFIG, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("rgbdslam")


class InputError(OSError):
    """Unreadable dataset or unwritable output."""


# -- configuration -------------------------------------------------------------

def _parse_set(items: list[str]) -> dict:
    """``section.key=value`` pairs into a nested dict; values are parsed as YAML scalars."""
    out: dict = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    over = _parse_set(getattr(args, "set", None) or [])

    def put(section: str, key: str, value) -> None:
        if value is not None:
            over.setdefault(section, {})[key] = value

    put("data", "dataset", getattr(args, "dataset", None))
    put("data", "scene", getattr(args, "scene", None))
    put("data", "max_frames", getattr(args, "max_frames", None))
    put("tracking", "mode", getattr(args, "mode", None))
    put("system", "seed", getattr(args, "seed", None))
    put("system", "output", getattr(args, "output", None))
    if getattr(args, "parallel", False):
        put("system", "deterministic", False)
    if getattr(args, "deterministic", False):
        put("system", "deterministic", True)
    cfg = load_config(getattr(args, "config", None), over)
    return cfg


# -- inputs ----------------------------------------------------------------------

def _scene_noise(cfg: RunConfig, default: NoiseModel) -> NoiseModel | None:
    if cfg.data.intensity_noise is None and cfg.data.disparity_noise is None:
        return None
    return dataclasses.replace(
        default,
        intensity_sigma=default.intensity_sigma if cfg.data.intensity_noise is None else cfg.data.intensity_noise,
        disparity_sigma=default.disparity_sigma if cfg.data.disparity_noise is None else cfg.data.disparity_noise,
    )


def render_scene(cfg: RunConfig):
    try:
        spec = scene_by_name(cfg.data.scene)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    noise = _scene_noise(cfg, spec.noise)
    if noise is not None:
        spec = spec.with_noise(noise)
    return render_sequence(spec, max_frames=cfg.data.max_frames)


def open_input(cfg: RunConfig) -> tuple[int, Iterator[Frame], list | None]:
    """Frame count, a lazy frame iterator and ground truth records (or None)."""
    d = cfg.data
    if (d.dataset is None) == (d.scene is None):
        raise ConfigError("give exactly one of data.dataset (--dataset) or data.scene (--scene)")
    if d.scene is not None:
        seq = render_scene(cfg)
        frames = (seq.frame(i, d.min_depth, d.max_depth, d.pyramid_levels) for i in range(len(seq)))
        return len(seq), frames, poses_to_records(seq.timestamps, seq.poses)
    root = Path(d.dataset)
    intr = None
    if not (root / "intrinsics.yaml").exists():
        intr = PinholeIntrinsics(d.fx, d.fy, d.cx, d.cy, 640, 480, d.baseline, d.disparity_sigma)
    manifest = load_sequence(root, intr, d.depth_scale, d.max_dt)
    entries = manifest.entries[: d.max_frames] if d.max_frames else manifest.entries
    frames = (load_frame(e, manifest, i, d.min_depth, d.max_depth, d.pyramid_levels) for i, e in enumerate(entries))
    gt_path = manifest.groundtruth_path
    return len(entries), frames, (read_trajectory(gt_path) if gt_path else None)


# -- outputs ---------------------------------------------------------------------

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.system.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    return out


def write_outputs(out: Path, result: SlamResult, cfg: RunConfig, gt: list | None, with_graph: bool) -> dict:
    write_trajectory(out / "trajectory.txt", poses_to_records(result.timestamps, result.poses))
    kfs = result.keyframe_list
    write_trajectory(out / "keyframes.txt", poses_to_records([kf.frame.timestamp for kf in kfs], [kf.pose for kf in kfs]))
    n_points = export_ply(out / "map.ply", kfs) if kfs else 0
    if with_graph:
        write_g2o(out / "graph.g2o", result.graph)
    with open(out / "timing.jsonl", "w") as fh:
        for rec, ms in zip(result.records, result.timing_ms):
            fh.write(json.dumps({"index": rec.index, "timestamp": rec.timestamp, "time_ms": ms}) + "\n")
    summary = {
        "status": result.status,
        "message": result.message,
        "frames": len(result.records),
        "keyframes": len(kfs),
        "loops": len(result.loops),
        "map_points": n_points,
        "mean_ms_per_frame": result.mean_ms,
    }
    if gt is not None and len(result.records) >= 3:
        try:
            summary["ate"] = compute_ate(poses_to_records(result.timestamps, result.poses), gt, cfg.data.max_dt).as_dict()
        except EvaluationError as exc:
            summary["ate_error"] = str(exc)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# -- subcommands -------------------------------------------------------------------

def cmd_run(args: argparse.Namespace, loop_closure: bool) -> int:
    cfg = build_config(args)
    out = _out_dir(cfg)
    dump_config(cfg, out / "config.yaml")
    n, frames, gt = open_input(cfg)
    verbose = os.environ.get("RGBDSLAM_VERBOSE", "") not in ("", "0")
    diag_fh = open(out / "diagnostics.jsonl", "w")

    def on_diag(rec: dict) -> None:
        line = json.dumps(rec, default=float)
        diag_fh.write(line + "\n")
        if verbose:
            print(line, file=sys.stderr)

    system = SlamSystem(cfg, loop_closure=loop_closure, on_diagnostic=on_diag)
    try:
        for frame in frames:
            system.process(frame)
    except TrackingLostError:
        log.warning("tracking lost: %s", system.message)
    finally:
        result = system.finish()
        diag_fh.close()
    summary = write_outputs(out, result, cfg, gt, with_graph=loop_closure)
    print(json.dumps(summary))
    return EXIT_OK if result.status == "ok" else EXIT_LOST


def cmd_render(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    seq = render_scene(cfg)
    root = seq.write(args.output)
    print(json.dumps({"scene": seq.spec.name, "frames": len(seq), "path": str(root)}))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    est = read_trajectory(args.estimated)
    gt = read_trajectory(args.ground_truth)
    report = compute_ate(est, gt, args.max_dt)
    print(json.dumps(report.as_dict()))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    if not args.scenes and not args.datasets:
        raise ConfigError("ablate needs at least one --scene or --dataset")
    sequences = []
    for name in args.scenes or []:
        scfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, scene=name, dataset=None))
        seq = render_scene(scfg)
        d = cfg.data
        sequences.append(AblationSequence(
            name, lambda seq=seq: [seq.frame(i, d.min_depth, d.max_depth, d.pyramid_levels) for i in range(len(seq))],
            poses_to_records(seq.timestamps, seq.poses)))
    for path in args.datasets or []:
        dcfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, dataset=path, scene=None))
        _, _, gt = open_input(dcfg)
        if gt is None:
            raise InputError(f"{path} has no groundtruth.txt")
        sequences.append(AblationSequence(Path(path).name, lambda c=dcfg: list(open_input(c)[1]), gt))
    modes = args.modes or list(cfg.evaluation.modes)
    seeds = [cfg.system.seed + k for k in range(cfg.evaluation.runs)]
    out = _out_dir(cfg)
    dump_config(cfg, out / "config.yaml")
    loop_closure = False if args.no_loop_closure else None
    matrix = run_ablation(sequences, modes, seeds, cfg, loop_closure,
                          progress=lambda c: print(json.dumps(c.as_record()), file=sys.stderr))
    matrix.write_jsonl(out / "ablation.jsonl")
    table = matrix.table()
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, input_flags: bool = True) -> None:
    p.add_argument("--config", help="YAML file with overrides of the defaults")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config entry (repeatable), e.g. tracking.lam=0.5")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", help="residual configuration (PS, PD, GIDS, GIDD, GIDD_FULL, PS_GIDD, PS_GDD)")
    p.add_argument("--max-frames", type=int)
    if input_flags:
        src = p.add_mutually_exclusive_group()
        src.add_argument("--dataset", help="TUM-layout sequence directory")
        src.add_argument("--scene", help="synthetic scene: a, b, c, d, loop or a full scene name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgbdslam", description="Direct RGB-D odometry and SLAM.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (("track", "visual odometry with keyframe mapping, no loop closure"),
                        ("slam", "full system with loop closure and map reuse")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--output", "-o", help="output directory")
        threads = p.add_mutually_exclusive_group()
        threads.add_argument("--deterministic", action="store_true",
                             help="map and close loops inline after each keyframe (the default)")
        threads.add_argument("--parallel", action="store_true",
                             help="run mapping and loop closure on worker threads (not bit-reproducible)")

    p = sub.add_parser("ablate", help="residual-configuration matrix, median of seeded runs")
    _common(p, input_flags=False)
    p.add_argument("--scene", dest="scenes", action="append", help="synthetic scene (repeatable)")
    p.add_argument("--dataset", dest="datasets", action="append", help="TUM sequence directory (repeatable)")
    p.add_argument("--modes", nargs="+", help="modes to evaluate (default: all)")
    p.add_argument("--no-loop-closure", action="store_true")
    p.add_argument("--output", "-o", help="output directory")

    p = sub.add_parser("render", help="write a synthetic scene as a TUM-layout sequence")
    p.add_argument("--scene", required=True)
    p.add_argument("--output", "-o", required=True, help="sequence directory to create")
    p.add_argument("--max-frames", type=int)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    p = sub.add_parser("evaluate", help="ATE between two trajectory files")
    p.add_argument("estimated")
    p.add_argument("ground_truth")
    p.add_argument("--max-dt", type=float, default=0.02)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("RGBDSLAM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("track", "slam"):
            return cmd_run(args, loop_closure=args.command == "slam")
        if args.command == "render":
            return cmd_render(args)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        return cmd_ablate(args)
    except (ConfigError, DegenerateSceneError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, TrajectoryParseError, EvaluationError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
