"""Closed-form absolute orientation and a RANSAC wrapper around it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .se3 import Pose


class DegenerateAlignmentError(ValueError):
    """Point set too small or collinear for a unique rigid alignment."""


def horn_align(points_a: np.ndarray, points_b: np.ndarray, allow_degenerate: bool = False) -> Pose:
    """Rigid ``T`` minimizing ``sum |b_i - T a_i|^2`` (Horn's unit-quaternion method).

    The optimal rotation is the eigenvector of the largest eigenvalue of the
    4x4 symmetric matrix built from the cross-covariance of the centered
    sets.  Raises :class:`DegenerateAlignmentError` for fewer than three
    points or a (near) collinear set unless ``allow_degenerate``.
    """
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape:
        raise ValueError(f"point sets differ in shape: {a.shape} vs {b.shape}")
    if len(a) < 3 and not allow_degenerate:
        raise DegenerateAlignmentError(f"need at least 3 correspondences, got {len(a)}")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    A, B = a - ca, b - cb
    if not allow_degenerate:
        sv = np.linalg.svd(A, compute_uv=False)
        if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
            raise DegenerateAlignmentError("points are collinear or coincident")
    S = A.T @ B
    (sxx, sxy, sxz), (syx, syy, syz), (szx, szy, szz) = S
    N = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    _, vecs = np.linalg.eigh(N)
    w, x, y, z = vecs[:, -1]
    R = np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])
    return Pose(R, cb - R @ ca)


@dataclass
class RansacResult:
    pose: Pose | None
    inliers: np.ndarray  # boolean mask over correspondences
    iterations: int

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def ransac_align(
    points_a: np.ndarray,
    points_b: np.ndarray,
    inlier_fn: Callable[[Pose], np.ndarray],
    rng: np.random.Generator,
    confidence: float = 0.99,
    max_iterations: int = 500,
    min_inliers: int = 3,
) -> RansacResult:
    """Three-point RANSAC with Horn hypotheses and a final refit on all inliers.

    ``inlier_fn(pose)`` returns the inlier mask of a hypothesis ``b ~ pose a``.
    The iteration count adapts to the best inlier ratio seen so far.
    """
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    n = len(a)
    best = np.zeros(n, dtype=bool)
    if n < 3:
        return RansacResult(None, best, 0)
    needed = max_iterations
    it = 0
    while it < min(needed, max_iterations):
        it += 1
        idx = rng.choice(n, 3, replace=False)
        try:
            T = horn_align(a[idx], b[idx])
        except DegenerateAlignmentError:
            continue
        mask = inlier_fn(T)
        if mask.sum() > best.sum():
            best = mask
            ratio = mask.mean()
            if ratio >= 1.0:
                needed = it
            else:
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - ratio ** 3))) if ratio > 0 else max_iterations
    if best.sum() < max(3, min_inliers):
        return RansacResult(None, best, it)
    pose = best_pose = horn_align(a[best], b[best])
    # refit until the inlier set stops changing
    for _ in range(5):
        mask = inlier_fn(pose)
        if mask.sum() < 3 or np.array_equal(mask, best):
            break
        best = mask
        best_pose = pose = horn_align(a[best], b[best], allow_degenerate=True)
    return RansacResult(best_pose, best, it)
