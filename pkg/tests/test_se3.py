import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from rgbdslam.se3 import (
    BehindCameraError,
    InverseDepthEstimate,
    NearSingularLogError,
    PinholeIntrinsics,
    Pose,
    backproject,
    compose,
    exp_se3,
    invert,
    log_so3,
    project,
    sigma_depth,
    sigma_inverse_depth,
    skew,
)

KINECT = PinholeIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480, baseline=0.075, disparity_sigma=0.5)

finite = st.floats(-1.0, 1.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


@st.composite
def twists(draw, max_angle=3.0):
    axis = draw(vec3)
    angle = draw(st.floats(0.0, max_angle))
    n = np.linalg.norm(axis)
    w = axis / n * angle if n > 1e-6 else np.zeros(3)
    v = draw(vec3) * 5.0
    return np.concatenate([w, v])


poses = twists().map(exp_se3)


def assert_pose_close(a: Pose, b: Pose, tol: float) -> None:
    np.testing.assert_allclose(a.R, b.R, atol=tol)
    np.testing.assert_allclose(a.t, b.t, atol=tol)


# -- exp / log ---------------------------------------------------------------

def test_exp_of_zero_is_identity():
    assert_pose_close(exp_se3(np.zeros(6)), Pose.identity(), 0.0)


def test_quarter_turn_about_z():
    p = exp_se3([0, 0, math.pi / 2, 0, 0, 0]).apply([1.0, 0.0, 0.0])
    np.testing.assert_allclose(p, [0.0, 1.0, 0.0], atol=1e-15)


def test_exp_matches_matrix_exponential():
    w = np.array([0.1, -0.2, 0.3])
    np.testing.assert_allclose(exp_se3(np.r_[w, 0, 0, 0]).R, expm(skew(w)), atol=1e-10)


def test_translation_is_copied_not_coupled():
    # the decoupled exponential leaves v untouched even with a large rotation
    T = exp_se3([0.0, 1.0, 0.0, 0.3, -0.2, 0.1])
    np.testing.assert_array_equal(T.t, [0.3, -0.2, 0.1])


def test_log_of_identity_is_zero():
    np.testing.assert_array_equal(log_so3(Pose.identity()), np.zeros(6))


def test_log_axis_aligned_round_trip():
    np.testing.assert_allclose(log_so3(exp_se3([0.5, 0, 0, 0, 0, 0]))[:3], [0.5, 0, 0], atol=1e-10)


def test_log_near_pi_is_rejected():
    with pytest.raises(NearSingularLogError):
        log_so3(exp_se3([0.0, 0.0, math.pi - 1e-8, 0, 0, 0]))


@settings(max_examples=300, deadline=None)
@given(twists())
def test_exp_log_round_trip(xi):
    back = log_so3(exp_se3(xi))
    assert np.abs(back[:3] - xi[:3]).max() < 1e-9
    np.testing.assert_array_equal(back[3:], xi[3:])


def test_log_round_trip_on_1000_random_poses():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3.0) / np.linalg.norm(w)
        P = exp_se3(np.r_[w, rng.normal(size=3)])
        Q = exp_se3(log_so3(P))
        assert np.abs(Q.R - P.R).max() < 1e-9
        np.testing.assert_array_equal(Q.t, P.t)


# -- group axioms --------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(poses)
def test_compose_with_inverse_is_identity(P):
    assert_pose_close(compose(P, invert(P)), Pose.identity(), 1e-12)
    assert_pose_close(compose(Pose.identity(), P), P, 0.0)


@settings(max_examples=200, deadline=None)
@given(poses, poses, poses)
def test_associativity(a, b, c):
    assert_pose_close(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-12)


def test_orthonormality_survives_a_million_compositions():
    rng = np.random.default_rng(0)
    steps = [exp_se3(np.r_[rng.normal(scale=0.3, size=3), np.zeros(3)]) for _ in range(64)]
    P = Pose.identity()
    for k in range(1_000_000):
        P = P.compose(steps[k & 63])
        if k % 100_000 == 0:
            assert P.is_valid()
    assert P.is_valid()


# -- projection ----------------------------------------------------------------

def test_project_principal_axis():
    np.testing.assert_allclose(project([0, 0, 2], KINECT), [319.5, 239.5])


def test_project_off_axis():
    np.testing.assert_allclose(project([0.5, 0, 2], KINECT), [450.75, 239.5])


def test_project_behind_camera_raises():
    with pytest.raises(BehindCameraError):
        project([0.0, 0.0, -1.0], KINECT)


def test_backproject_principal_point():
    np.testing.assert_allclose(backproject([319.5, 239.5], 0.5, KINECT), [0, 0, 2])


def test_backproject_rejects_nonpositive_rho():
    with pytest.raises(ValueError):
        backproject([10.0, 10.0], 0.0, KINECT)


def test_backproject_off_axis_pixel():
    # oracle: the ray through (u, v) scaled to depth z, built from K^-1 directly
    uv, z = np.array([100.0, 400.0]), 3.0
    ray = np.linalg.solve(KINECT.K, np.r_[uv, 1.0])
    np.testing.assert_allclose(backproject(uv, 1 / z, KINECT), ray * z, atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.2, 20))
def test_project_backproject_round_trip(x, y, z):
    p = np.array([x, y, z])
    np.testing.assert_allclose(backproject(project(p, KINECT), 1 / z, KINECT), p, atol=1e-12 * max(1, z))


# -- structured-light noise ------------------------------------------------------

def test_sigma_depth_value():
    assert sigma_depth(2.0, KINECT) == pytest.approx(0.050794, abs=5e-7)


def test_sigma_depth_quadratic():
    assert sigma_depth(4.0, KINECT) == pytest.approx(4 * sigma_depth(2.0, KINECT), rel=1e-15)


def test_sigma_inverse_depth_value():
    assert sigma_inverse_depth(KINECT) == pytest.approx(0.012698, abs=5e-7)


@pytest.mark.parametrize("z", [0.5, 1.0, 2.0, 4.5])
def test_noise_model_matches_finite_difference_propagation(z):
    fb, sd = KINECT.fx * KINECT.baseline, KINECT.disparity_sigma
    d, h = fb / z, 1e-4
    dz_dd = (fb / (d + h) - fb / (d - h)) / (2 * h)
    drho_dd = ((d + h) / fb - (d - h) / fb) / (2 * h)
    assert abs(abs(dz_dd) * sd / sigma_depth(z, KINECT) - 1) < 1e-4
    assert abs(drho_dd * sd / sigma_inverse_depth(KINECT) - 1) < 1e-4


@settings(max_examples=200, deadline=None)
@given(st.floats(0.1, 50.0))
def test_depth_and_inverse_depth_sigmas_agree(z):
    assert sigma_depth(z, KINECT) == pytest.approx(sigma_inverse_depth(KINECT) * z * z, rel=1e-12)


@pytest.mark.parametrize("kwargs", [dict(fx=-1.0), dict(cx=700.0), dict(baseline=0.0), dict(disparity_sigma=0.0)])
def test_intrinsics_validation(kwargs):
    base = dict(fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480)
    with pytest.raises(ValueError):
        PinholeIntrinsics(**{**base, **kwargs})


def test_inverse_depth_estimate_validation():
    with pytest.raises(ValueError):
        InverseDepthEstimate(-0.1, 0.01)
    with pytest.raises(ValueError):
        InverseDepthEstimate(0.5, 0.0)
