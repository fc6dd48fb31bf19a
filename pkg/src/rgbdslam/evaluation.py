"""Absolute trajectory error and the residual-configuration ablation matrix."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .alignment import horn_align
from .config import RunConfig
from .dataset import TrajectoryRecord, associate, poses_to_records
from .image import Frame
from .se3 import Pose
from .system import run_slam

log = logging.getLogger(__name__)

FAILED = "-"


class EvaluationError(ValueError):
    """Too few associated poses to evaluate a trajectory."""


@dataclass(frozen=True)
class AteReport:
    rmse: float
    mean: float
    median: float
    max: float
    alignment: Pose  # maps estimated positions onto ground truth
    matched: int

    def as_dict(self) -> dict:
        return {"rmse": self.rmse, "mean": self.mean, "median": self.median, "max": self.max,
                "matched": self.matched}


def compute_ate(estimated: Sequence[TrajectoryRecord], ground_truth: Sequence[TrajectoryRecord],
                max_dt: float = 0.02) -> AteReport:
    """ATE after the rigid alignment that best maps estimated onto true positions.

    Poses are paired by nearest timestamp within ``max_dt``. At least three
    pairs are required; collinear trajectories are still aligned (the rotation
    about the line is then arbitrary but does not change the error).
    """
    pairs = associate([r.timestamp for r in estimated], [r.timestamp for r in ground_truth], max_dt)
    if len(pairs) < 3:
        raise EvaluationError(f"only {len(pairs)} timestamp matches (need 3)")
    est = np.array([estimated[i].translation for i, _ in pairs], dtype=np.float64)
    gt = np.array([ground_truth[j].translation for _, j in pairs], dtype=np.float64)
    T = horn_align(est, gt, allow_degenerate=True)
    err = np.linalg.norm(gt - T.apply(est), axis=1)
    return AteReport(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mean=float(err.mean()),
        median=float(np.median(err)),
        max=float(err.max()),
        alignment=T,
        matched=len(pairs),
    )


def ate_of_poses(timestamps: Sequence[float], estimated: Sequence[Pose], truth: Sequence[Pose]) -> AteReport:
    """Shortcut for trajectories already sampled at the same timestamps."""
    return compute_ate(poses_to_records(timestamps, estimated), poses_to_records(timestamps, truth), max_dt=1e-6)


@dataclass
class AblationSequence:
    """A named sequence: a frame factory (called once per run) and its ground truth."""

    name: str
    frames: Callable[[], Sequence[Frame]]
    ground_truth: list[TrajectoryRecord]


@dataclass
class AblationCell:
    sequence: str
    mode: str
    runs: list[float | None]  # RMSE per seed, None when tracking was lost
    median: float | None = None

    @property
    def label(self) -> str:
        return FAILED if self.median is None else f"{100.0 * self.median:.1f}"

    def as_record(self) -> dict:
        return {"sequence": self.sequence, "mode": self.mode, "runs": self.runs,
                "median_rmse": self.median, "cell": self.label}


@dataclass
class AblationMatrix:
    sequences: list[str]
    modes: list[str]
    cells: dict[tuple[str, str], AblationCell] = field(default_factory=dict)

    def cell(self, sequence: str, mode: str) -> AblationCell:
        return self.cells[(sequence, mode)]

    def records(self) -> list[dict]:
        return [self.cells[(s, m)].as_record() for s in self.sequences for m in self.modes]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    def table(self) -> str:
        """Plain-text table: one row per mode, one column per sequence, RMSE in cm."""
        head = ["mode"] + self.sequences
        rows = [[m] + [self.cells[(s, m)].label for s in self.sequences] for m in self.modes]
        widths = [max(len(r[c]) for r in [head] + rows) for c in range(len(head))]
        fmt = lambda r: "  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(r, widths)))
        lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
        return "\n".join(lines) + "\n"


def summarize_runs(runs: Sequence[float | None], min_successes: int) -> float | None:
    ok = [r for r in runs if r is not None]
    return float(np.median(ok)) if len(ok) >= min_successes else None


def run_ablation(sequences: Sequence[AblationSequence], modes: Sequence[str], seeds: Sequence[int],
                 cfg: RunConfig | None = None, loop_closure: bool | None = None,
                 progress: Callable[[AblationCell], None] | None = None) -> AblationMatrix:
    """Run every (sequence, mode) pair once per seed and take the median RMSE.

    A run that loses tracking counts as a failure; cells with fewer than
    ``cfg.evaluation.min_successes`` successful runs are reported as failed.
    """
    cfg = cfg or RunConfig()
    matrix = AblationMatrix([s.name for s in sequences], list(modes))
    for seq in sequences:
        for mode in modes:
            runs: list[float | None] = []
            for seed in seeds:
                run_cfg = replace(cfg, tracking=replace(cfg.tracking, mode=mode),
                                  system=replace(cfg.system, seed=int(seed)))
                res = run_slam(seq.frames(), run_cfg, loop_closure=loop_closure)
                if res.status != "ok":
                    runs.append(None)
                    continue
                est = poses_to_records(res.timestamps, res.poses)
                runs.append(compute_ate(est, seq.ground_truth, cfg.data.max_dt).rmse)
            cell = AblationCell(seq.name, mode, runs, summarize_runs(runs, cfg.evaluation.min_successes))
            matrix.cells[(seq.name, mode)] = cell
            log.info("ablation %s %s -> %s", seq.name, mode, cell.label)
            if progress is not None:
                progress(cell)
    return matrix
