"""Rigid-body geometry: SO(3)/SE(3) maps, pinhole projection and the
structured-light noise model.

Conventions
-----------
* A :class:`Pose` maps points from its own frame into the parent frame,
  ``p_parent = R @ p + t``.  Camera poses are stored camera-to-world.
* A twist is a 6-vector ``[omega, v]`` (rotation first, radians then meters).
* :func:`exp_se3` composes the SO(3) exponential with a plain translation
  increment; the translation is *not* coupled to the rotation through the
  SE(3) V-matrix.  Tracking and pose-graph updates rely on this form.
* Pixel coordinates are ``(u, v)`` with ``u`` along image columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_EYE3 = np.eye(3)
ORTHO_TOL = 1e-9
LOG_SINGULAR_MARGIN = 1e-6


class NearSingularLogError(ValueError):
    """Rotation angle is too close to pi for an unambiguous logarithm."""


class BehindCameraError(ValueError):
    """A point with non-positive depth was projected."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[w]x`` such that ``skew(w) @ p == cross(w, p)``."""
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    K = skew(omega)
    if theta2 < 1e-16:
        # second-order series, exact to machine precision at this size
        return _EYE3 + K + 0.5 * (K @ K)
    theta = math.sqrt(theta2)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta2
    return _EYE3 + a * K + b * (K @ K)


def log_rotation(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R``.

    Raises :class:`NearSingularLogError` when the angle is within 1e-6 of pi,
    where the axis is ill-defined from the antisymmetric part.
    """
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(w))
    c = 0.5 * (float(np.trace(R)) - 1.0)
    theta = math.atan2(s, c)
    if theta >= math.pi - LOG_SINGULAR_MARGIN:
        raise NearSingularLogError(f"rotation angle {theta:.9f} too close to pi")
    if s < 1e-12:
        # theta/sin(theta) -> 1 + theta^2/6
        return w * (1.0 + theta * theta / 6.0)
    return w * (theta / s)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with an orthonormal 3x3 rotation and a translation."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "R", _frozen(self.R).reshape(3, 3))
        object.__setattr__(self, "t", _frozen(self.t).reshape(3))

    @classmethod
    def identity(cls) -> Pose:
        return cls(_EYE3, np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: Pose) -> Pose:
        """``self * other``; re-orthonormalizes once drift exceeds 1e-9."""
        R = self.R @ other.R
        if np.abs(R.T @ R - _EYE3).max() > ORTHO_TOL:
            R = _orthonormalize(R)
        return Pose(R, self.R @ other.t + self.t)

    __matmul__ = compose

    def inverse(self) -> Pose:
        Rt = self.R.T
        return Pose(Rt, -(Rt @ self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a point ``(3,)`` or an array of points ``(N, 3)``."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t

    def orthonormality_error(self) -> float:
        return float(np.abs(self.R.T @ self.R - _EYE3).max())

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        return (
            self.orthonormality_error() <= tol
            and abs(np.linalg.det(self.R) - 1.0) <= tol
            and bool(np.all(np.isfinite(self.t)))
        )

    def rotation_angle(self) -> float:
        c = 0.5 * (float(np.trace(self.R)) - 1.0)
        return math.acos(min(1.0, max(-1.0, c)))

    def __repr__(self) -> str:
        return f"Pose(R={self.R.tolist()}, t={self.t.tolist()})"


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Rn = U @ Vt
    if np.linalg.det(Rn) < 0:
        U[:, -1] *= -1
        Rn = U @ Vt
    return Rn


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def invert(a: Pose) -> Pose:
    return a.inverse()


def exp_se3(xi: np.ndarray) -> Pose:
    """Pose from a twist ``[omega, v]``: rotation ``exp_so3(omega)``, translation ``v``."""
    xi = np.asarray(xi, dtype=np.float64)
    return Pose(exp_so3(xi[:3]), xi[3:6])


def log_so3(pose: Pose) -> np.ndarray:
    """Inverse of :func:`exp_se3`: ``[log(R), t]``."""
    return np.concatenate([log_rotation(pose.R), pose.t])


@dataclass(frozen=True)
class PinholeIntrinsics:
    """Pinhole camera plus the structured-light parameters used by the noise model."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    baseline: float = 0.075
    disparity_sigma: float = 0.5

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not (self.baseline > 0 and self.disparity_sigma > 0):
            raise ValueError("baseline and disparity_sigma must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, octaves: int) -> PinholeIntrinsics:
        """Intrinsics after ``octaves`` 2x2 box downsamplings.

        A coarse pixel ``i`` covers fine pixels ``2i, 2i+1``, so centers map as
        ``u_coarse = (u_fine - 0.5) / 2``.
        """
        fx, fy, cx, cy = self.fx, self.fy, self.cx, self.cy
        w, h = self.width, self.height
        for _ in range(octaves):
            fx, fy = fx / 2, fy / 2
            cx, cy = (cx + 0.5) / 2 - 0.5, (cy + 0.5) / 2 - 0.5
            w, h = w // 2, h // 2
        return PinholeIntrinsics(fx, fy, cx, cy, w, h, self.baseline, self.disparity_sigma)

    def cropped(self, x0: int, y0: int, width: int, height: int) -> PinholeIntrinsics:
        return PinholeIntrinsics(
            self.fx, self.fy, self.cx - x0, self.cy - y0, width, height,
            self.baseline, self.disparity_sigma,
        )


@dataclass(frozen=True)
class InverseDepthEstimate:
    rho: float
    sigma: float

    def __post_init__(self) -> None:
        if self.rho < 0 or not self.sigma > 0:
            raise ValueError(f"invalid inverse-depth estimate rho={self.rho} sigma={self.sigma}")


def project_points(points: np.ndarray, intr: PinholeIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns ``(uv, in_front)``; rows with z <= 0 are NaN."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    z = points[:, 2]
    ok = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(ok, 1.0 / np.where(ok, z, 1.0), np.nan)
    uv = np.empty((points.shape[0], 2))
    uv[:, 0] = intr.fx * points[:, 0] * inv + intr.cx
    uv[:, 1] = intr.fy * points[:, 1] * inv + intr.cy
    return uv, ok


def project(p_cam: np.ndarray, intr: PinholeIntrinsics) -> np.ndarray:
    """Pixel of a single camera-frame point; raises for points at or behind the camera."""
    p = np.asarray(p_cam, dtype=np.float64)
    if p[2] <= 0:
        raise BehindCameraError(f"point depth {p[2]} is not positive")
    return np.array([intr.fx * p[0] / p[2] + intr.cx, intr.fy * p[1] / p[2] + intr.cy])


def backproject_points(uv: np.ndarray, rho: np.ndarray, intr: PinholeIntrinsics) -> np.ndarray:
    """Vectorized inverse of :func:`project_points` for points at inverse depth ``rho``."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    z = 1.0 / np.asarray(rho, dtype=np.float64)
    out = np.empty((uv.shape[0], 3))
    out[:, 0] = (uv[:, 0] - intr.cx) / intr.fx * z
    out[:, 1] = (uv[:, 1] - intr.cy) / intr.fy * z
    out[:, 2] = z
    return out


def backproject(pixel: np.ndarray, rho: float, intr: PinholeIntrinsics) -> np.ndarray:
    if not rho > 0:
        raise ValueError(f"inverse depth must be positive, got {rho}")
    return backproject_points(np.asarray(pixel)[None], np.array([rho]), intr)[0]


def sigma_depth(z: float | np.ndarray, intr: PinholeIntrinsics) -> float | np.ndarray:
    """First-order depth std of a structured-light sensor: ``z^2 sigma_d / (f b)``."""
    return np.square(z) * intr.disparity_sigma / (intr.fx * intr.baseline)


def sigma_inverse_depth(intr: PinholeIntrinsics) -> float:
    """Inverse-depth std ``sigma_d / (f b)``; constant because rho is linear in disparity."""
    return intr.disparity_sigma / (intr.fx * intr.baseline)
