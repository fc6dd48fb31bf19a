import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbdslam.config import EvaluationConfig, RunConfig
from rgbdslam.dataset import poses_to_records
from rgbdslam.evaluation import (
    FAILED,
    AblationCell,
    AblationMatrix,
    AblationSequence,
    EvaluationError,
    ate_of_poses,
    compute_ate,
    run_ablation,
    summarize_runs,
)
from rgbdslam.se3 import Pose, exp_se3
from rgbdslam.synthetic import render_sequence, scene_by_name


def random_walk(rng, n=50):
    poses, cur = [], Pose.identity()
    for _ in range(n):
        cur = cur.compose(exp_se3(rng.normal(0, [0.05, 0.05, 0.05, 0.1, 0.1, 0.1])))
        poses.append(cur)
    return poses


def random_pose(rng):
    return exp_se3(np.r_[rng.normal(size=3), rng.normal(scale=3.0, size=3)])


def test_identical_trajectories_have_zero_error():
    rng = np.random.default_rng(0)
    poses = random_walk(rng)
    rep = ate_of_poses(range(len(poses)), poses, poses)
    assert rep.rmse < 1e-12 and rep.matched == len(poses)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_ate_ignores_a_global_rigid_transform(seed):
    rng = np.random.default_rng(seed)
    truth = random_walk(rng)
    est = [p.compose(exp_se3(rng.normal(0, 0.01, 6))) for p in truth]
    G = random_pose(rng)
    ts = range(len(truth))
    base = ate_of_poses(ts, est, truth).rmse
    assert ate_of_poses(ts, [G.compose(p) for p in est], truth).rmse == pytest.approx(base, abs=1e-9)
    assert ate_of_poses(ts, est, [G.compose(p) for p in truth]).rmse == pytest.approx(base, abs=1e-9)
    # an exactly moved copy aligns to zero
    assert ate_of_poses(ts, [G.compose(p) for p in truth], truth).rmse < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_ate_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = random_walk(rng)
    b = [p.compose(exp_se3(rng.normal(0, 0.02, 6))) for p in a]
    ts = range(len(a))
    assert ate_of_poses(ts, a, b).rmse == pytest.approx(ate_of_poses(ts, b, a).rmse, abs=1e-9)


def test_isotropic_noise_gives_root_three_sigma():
    # Monte-Carlo oracle: 3 independent axes of 1 cm each
    rng = np.random.default_rng(1)
    truth = random_walk(rng, 1000)
    est = [Pose(p.R, p.t + rng.normal(0, 0.01, 3)) for p in truth]
    rep = ate_of_poses(range(1000), est, truth)
    assert rep.rmse == pytest.approx(math.sqrt(3) * 0.01, rel=0.10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_report_orders_its_statistics(seed):
    rng = np.random.default_rng(seed)
    truth = random_walk(rng, 20)
    est = [Pose(p.R, p.t + rng.normal(0, 0.05, 3)) for p in truth]
    rep = ate_of_poses(range(20), est, truth)
    assert rep.max >= rep.rmse >= rep.mean >= 0
    assert rep.matched == 20


def test_association_uses_timestamps():
    rng = np.random.default_rng(2)
    truth = random_walk(rng, 30)
    gt = poses_to_records([k * 0.1 for k in range(30)], truth)
    est = poses_to_records([k * 0.1 + 0.005 for k in range(0, 30, 2)], truth[::2])
    rep = compute_ate(est, gt, max_dt=0.02)
    assert rep.matched == 15 and rep.rmse < 1e-9
    with pytest.raises(EvaluationError):
        compute_ate(est, gt, max_dt=0.001)


def test_two_pairs_are_not_enough():
    poses = random_walk(np.random.default_rng(3), 2)
    with pytest.raises(EvaluationError):
        ate_of_poses([0, 1], poses, poses)


# -- ablation summary -------------------------------------------------------------------

def test_median_needs_enough_successes():
    assert summarize_runs([0.01, 0.03, 0.02, None, None], 3) == pytest.approx(0.02)
    assert summarize_runs([0.01, 0.03, None, None, None], 3) is None
    assert summarize_runs([None] * 5, 3) is None


def test_table_and_records():
    m = AblationMatrix(["seq_a", "seq_b"], ["PS", "GIDD"])
    m.cells[("seq_a", "PS")] = AblationCell("seq_a", "PS", [0.012] * 5, 0.012)
    m.cells[("seq_a", "GIDD")] = AblationCell("seq_a", "GIDD", [None] * 5, None)
    m.cells[("seq_b", "PS")] = AblationCell("seq_b", "PS", [0.1] * 5, 0.1)
    m.cells[("seq_b", "GIDD")] = AblationCell("seq_b", "GIDD", [0.05] * 5, 0.05)
    lines = m.table().splitlines()
    assert lines[0].split() == ["mode", "seq_a", "seq_b"]
    assert lines[2].split() == ["PS", "1.2", "10.0"]
    assert lines[3].split() == ["GIDD", FAILED, "5.0"]
    recs = m.records()
    assert len(recs) == 4 and recs[1]["cell"] == FAILED and recs[1]["median_rmse"] is None
    json.dumps(recs)


def test_ablation_is_reproducible_with_identical_seeds(tmp_path):
    seq = render_sequence(scene_by_name("a"), max_frames=12)
    sequence = AblationSequence("a", seq.frames, poses_to_records(seq.timestamps, seq.poses))
    cfg = RunConfig(evaluation=EvaluationConfig(runs=3, min_successes=3))
    m = run_ablation([sequence], ["PS_GIDD"], [7, 7, 7], cfg, loop_closure=False)
    cell = m.cell("a", "PS_GIDD")
    assert None not in cell.runs
    assert cell.runs[0] == cell.runs[1] == cell.runs[2] == cell.median
    m.write_jsonl(tmp_path / "m.jsonl")
    rec = json.loads((tmp_path / "m.jsonl").read_text())
    assert rec["runs"] == cell.runs
