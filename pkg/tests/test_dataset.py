from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbdslam.dataset import (
    DatasetError,
    TrajectoryParseError,
    associate,
    build_manifest,
    decode_depth,
    encode_depth,
    export_ply,
    format_record,
    frame_from_raw,
    load_frame,
    load_sequence,
    poses_to_records,
    read_ply,
    read_trajectory,
    record_from_pose,
    write_sequence,
    write_trajectory,
)
from rgbdslam.se3 import PinholeIntrinsics, Pose, exp_se3

SMALL = PinholeIntrinsics(262.5, 262.5, 159.5, 119.5, 320, 240)


# -- association -------------------------------------------------------------------

def test_identical_lists_pair_one_to_one():
    ts = [0.0, 0.033, 0.066, 0.1]
    assert associate(ts, ts) == [(i, i) for i in range(4)]


def test_greedy_hand_trace():
    assert associate([0.0, 1.0, 2.0], [0.01, 1.5], max_dt=0.02) == [(0, 0)]


def test_disjoint_ranges_raise():
    with pytest.raises(DatasetError):
        build_manifest([(0.0, "a.png"), (0.1, "b.png")], [(5.0, "c.png")])


def test_each_entry_used_once():
    pairs = associate([0.0, 0.005], [0.001], max_dt=0.02)
    assert pairs == [(0, 0)]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-0.015, 0.015), min_size=5, max_size=30), st.floats(-0.02, 0.02), st.integers(0, 2 ** 31))
def test_association_is_symmetric(jitter, offset, seed):
    rng = np.random.default_rng(seed)
    a = [k / 30 + j for k, j in enumerate(jitter)]
    b = [k / 30 + offset + rng.uniform(-0.01, 0.01) for k in range(len(jitter) + 3)]
    forward = set(associate(a, b))
    backward = {(i, j) for j, i in associate(b, a)}
    assert forward == backward


# -- depth decoding --------------------------------------------------------------------

def test_depth_scale():
    assert decode_depth(np.array([5000], np.uint16))[0] == 1.0


def test_depth_encode_decode_is_exact_for_all_16_bit_values():
    raw = np.arange(65536, dtype=np.uint16)
    np.testing.assert_array_equal(encode_depth(decode_depth(raw)), raw)


def test_invalid_and_out_of_range_depth():
    raw = np.full((240, 320), 5000, np.uint16)
    raw[0, 0] = 0
    raw[0, 1] = 65535  # 13.107 m, past the 7 m limit
    assert decode_depth(raw)[0, 1] == pytest.approx(13.107)
    f = frame_from_raw(np.zeros((240, 320, 3), np.uint8), raw, SMALL, 0.0)
    d, rho = f.depth[-1], f.inv_depth[-1]
    assert d[0, 0] == 0 and d[0, 1] == 0 and rho[0, 0] == 0 and rho[0, 1] == 0
    assert d[5, 5] == 1.0 and rho[5, 5] == 1.0


def test_sequence_round_trip_on_disk(tmp_path):
    rng = np.random.default_rng(0)
    rgbs = [rng.integers(0, 256, (240, 320, 3), dtype=np.uint8) for _ in range(3)]
    raws = [rng.integers(0, 40000, (240, 320), dtype=np.uint16) for _ in range(3)]
    ts = [0.0, 1 / 30, 2 / 30]
    gt = [exp_se3([0, 0.1 * k, 0, 0.01 * k, 0, 0]) for k in range(3)]
    write_sequence(tmp_path, ts, rgbs, raws, SMALL, gt)
    manifest = load_sequence(tmp_path)
    assert len(manifest) == 3 and manifest.intrinsics == SMALL
    stamps = [e.timestamp for e in manifest.entries]
    assert stamps == sorted(stamps)
    for i, e in enumerate(manifest.entries):
        disk = load_frame(e, manifest, i)
        mem = frame_from_raw(rgbs[i], raws[i], SMALL, e.timestamp, i)
        np.testing.assert_array_equal(disk.gray[-1], mem.gray[-1])
        np.testing.assert_array_equal(disk.depth[-1], mem.depth[-1])
    back = read_trajectory(manifest.groundtruth_path)
    for rec, pose in zip(back, gt):
        np.testing.assert_allclose(rec.pose().R, pose.R, atol=1e-8)


def test_missing_sequence_directory(tmp_path):
    with pytest.raises(DatasetError):
        load_sequence(tmp_path / "nope")


def test_wrong_bit_depth_rejected(tmp_path):
    write_sequence(tmp_path, [0.0], [np.zeros((240, 320, 3), np.uint8)], [np.zeros((240, 320), np.uint16)], SMALL)
    import cv2
    cv2.imwrite(str(tmp_path / "depth" / "0.000000.png"), np.zeros((240, 320), np.uint8))
    manifest = load_sequence(tmp_path)
    with pytest.raises(DatasetError):
        load_frame(manifest.entries[0], manifest)


# -- trajectories ---------------------------------------------------------------------------

def test_identity_pose_line():
    assert format_record(record_from_pose(1.5, Pose.identity())) == "1.500000 0 0 0 0 0 0 1"


twist = st.lists(st.floats(-3.0, 3.0), min_size=6, max_size=6).map(
    lambda x: np.r_[np.asarray(x[:3]) / max(1.0, np.linalg.norm(x[:3]) / 2.5), x[3:]]
)


@settings(max_examples=100, deadline=None)
@given(st.lists(twist, min_size=1, max_size=10))
def test_trajectory_round_trip(tmp_path_factory, xis):
    path = tmp_path_factory.mktemp("traj") / "t.txt"
    poses = [exp_se3(x) for x in xis]
    write_trajectory(path, poses_to_records([0.1 * k for k in range(len(poses))], poses))
    back = read_trajectory(path)
    for rec, pose in zip(back, poses):
        p = rec.pose()
        assert np.abs(p.R - pose.R).max() < 1e-8
        assert np.abs(p.t - pose.t).max() < 1e-8


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# header\n0 0 0 0 0 0 0 1\n1 2 3\n")
    with pytest.raises(TrajectoryParseError, match=r"bad\.txt:3:") as info:
        read_trajectory(path)
    assert info.value.lineno == 3


# -- PLY ---------------------------------------------------------------------------------

def _keyframe(pose, points, intensity):
    ps = SimpleNamespace(points=np.asarray(points, float), intensity=np.asarray(intensity, float))
    return SimpleNamespace(pose=pose, photometric=[ps])


def test_single_point_on_principal_ray(tmp_path):
    n = export_ply(tmp_path / "m.ply", [_keyframe(Pose.identity(), [[0, 0, 2.0]], [100])])
    pts, cols = read_ply(tmp_path / "m.ply")
    assert n == 1
    np.testing.assert_allclose(pts, [[0, 0, 2]])
    assert cols.tolist() == [[100, 100, 100]]


def test_vertex_count_and_rigid_shift(tmp_path):
    pts = np.random.default_rng(1).normal(size=(50, 3))
    kfs = [_keyframe(Pose.identity(), pts, np.zeros(50)), _keyframe(Pose(np.eye(3), [1.0, 0, 0]), pts, np.zeros(50))]
    assert export_ply(tmp_path / "m.ply", kfs) == 100
    out, _ = read_ply(tmp_path / "m.ply")
    np.testing.assert_allclose(out[50:] - out[:50], np.tile([1.0, 0, 0], (50, 1)), atol=2e-6)


def test_export_needs_a_keyframe(tmp_path):
    with pytest.raises(ValueError):
        export_ply(tmp_path / "m.ply", [])
