"""Place recognition, loop verification and the map-reuse decision.

Appearance retrieval uses a tiny blurred thumbnail per keyframe; geometric
verification matches ORB features (FAST corners with 256-bit rotated BRIEF
descriptors), back-projects them with sensor depth and runs three-point
RANSAC around Horn's closed-form alignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import cv2
import numpy as np
from scipy import ndimage
from skimage import feature

from .alignment import ransac_align
from .image import Frame
from .mapping import Keyframe, overlap_fraction
from .se3 import Pose, backproject_points, project_points
from .tracking import ResidualConfig, TrackingLostError, TrackingState, alignment_residuals, track_frame



@dataclass(frozen=True)
class LoopConfig:
    ratio_threshold: float = 0.5
    min_score: float = 0.5
    n_neighbors_excluded: int = 2
    min_keyframes: int = 3
    n_keypoints: int = 500
    fast_threshold: float = 0.02
    orb_scales: int = 4
    max_hamming: float = 0.25
    inlier_px: float = 2.0
    min_inliers: int = 30
    confidence: float = 0.99
    max_ransac_iterations: int = 500
    blur_sigma: float = 3.0
    global_width: int = 40
    global_height: int = 30
    reuse_overlap: float = 0.80
    reuse_sigma_ph: float = 15.0
    reuse_sigmas: float = 3.0
    max_depth_jump: float = 0.3  # relative range of median-filtered depth in 5x5 marking an occluding contour
    refine_reprojection: bool = True


@dataclass(frozen=True, eq=False)
class PlaceDescriptor:
    global_vec: np.ndarray  # unit norm, zero mean
    keypoints: np.ndarray  # (N, 2) (u, v) finest-level pixels
    scales: np.ndarray  # (N,) pyramid scale factor of each keypoint
    descriptors: np.ndarray  # (N, 256) bool
    points: np.ndarray  # (N, 3) camera-frame points from sensor depth


def global_descriptor(gray: np.ndarray, blur_sigma: float = 3.0, size: tuple[int, int] = (40, 30)) -> np.ndarray:
    """Blurred ``size`` thumbnail, zero mean and unit norm."""
    small = cv2.resize(np.asarray(gray, dtype=np.float32), size, interpolation=cv2.INTER_AREA)
    small = cv2.GaussianBlur(small, (0, 0), blur_sigma).astype(np.float64).ravel()
    small -= small.mean()
    n = np.linalg.norm(small)
    return small / n if n > 0 else small


def appearance_score(a: np.ndarray, b: np.ndarray) -> float:
    """Correlation of two global descriptors clipped to ``[0, 1]``."""
    return float(max(0.0, min(1.0, float(a @ b))))


def compute_descriptor(frame: Frame, cfg: LoopConfig = LoopConfig()) -> PlaceDescriptor:
    """Global thumbnail plus ORB keypoints that have valid sensor depth."""
    lvl = frame.finest
    gray = frame.gray[lvl]
    gvec = global_descriptor(gray, cfg.blur_sigma, (cfg.global_width, cfg.global_height))
    empty = PlaceDescriptor(gvec, np.zeros((0, 2)), np.zeros(0), np.zeros((0, 256), bool), np.zeros((0, 3)))
    orb = feature.ORB(n_keypoints=cfg.n_keypoints, fast_threshold=cfg.fast_threshold,
                      downscale=2.0, n_scales=cfg.orb_scales)
    try:
        orb.detect_and_extract(gray / 255.0)
    except RuntimeError:  # no corners at all
        return empty
    if len(orb.keypoints) == 0:
        return empty
    rc = orb.keypoints
    uv = rc[:, ::-1].astype(np.float64)
    depth = frame.depth[lvl]
    ui = np.clip(np.rint(uv[:, 0]).astype(int), 0, depth.shape[1] - 1)
    vi = np.clip(np.rint(uv[:, 1]).astype(int), 0, depth.shape[0] - 1)
    z = depth[vi, ui]
    # corners on occluding contours take an arbitrary side's depth; drop them
    smooth = ndimage.median_filter(depth, 3)
    hi = ndimage.maximum_filter(smooth, 5)[vi, ui]
    lo = ndimage.minimum_filter(np.where(smooth > 0, smooth, np.inf), 5)[vi, ui]
    ok = (z > 0) & (hi - lo <= cfg.max_depth_jump * z)
    if not ok.any():
        return empty
    pts = backproject_points(uv[ok], 1.0 / z[ok], frame.intrinsics[lvl])
    return PlaceDescriptor(gvec, uv[ok], np.asarray(orb.scales)[ok], np.asarray(orb.descriptors)[ok], pts)


@dataclass
class LoopCandidate:
    query_id: int
    match_id: int
    score: float
    ratio: float
    transform: Pose | None = None  # T_query_match: match-local points into query frame
    n_matches: int = 0
    n_inliers: int = 0
    accepted: bool = False
    reason: str = ""


def detect_loop_candidate(current: Keyframe, keyframes: Sequence[Keyframe], descriptors: dict[int, PlaceDescriptor],
                          cfg: LoopConfig = LoopConfig()) -> LoopCandidate | None:
    """Best-scoring non-neighbour keyframe passing the ratio test.

    The ratio is ``score(best) / score(previous keyframe)``; the two most
    recent keyframes before ``current`` are neighbours and never matched.
    """
    older = sorted((k for k in keyframes if k.id < current.id), key=lambda k: k.id)
    if len(older) + 1 < cfg.min_keyframes:
        return None
    q = descriptors[current.id].global_vec
    neighbors = older[-cfg.n_neighbors_excluded:]
    pool = older[: len(older) - cfg.n_neighbors_excluded]
    if not pool:
        return None
    ref = appearance_score(q, descriptors[neighbors[-1].id].global_vec)
    scores = [(appearance_score(q, descriptors[k.id].global_vec), k.id) for k in pool]
    best, best_id = max(scores, key=lambda s: (s[0], -s[1]))
    if best < cfg.min_score:
        return None
    ratio = best / ref if ref > 0 else math.inf
    if ratio <= cfg.ratio_threshold:
        return None
    return LoopCandidate(current.id, best_id, best, ratio)


def match_features(da: PlaceDescriptor, db: PlaceDescriptor, max_hamming: float = 0.25) -> np.ndarray:
    """Mutual nearest neighbours by Hamming distance, ``(M, 2)`` index pairs."""
    if len(da.descriptors) == 0 or len(db.descriptors) == 0:
        return np.zeros((0, 2), dtype=int)
    return feature.match_descriptors(da.descriptors, db.descriptors, metric="hamming",
                                     cross_check=True, max_distance=max_hamming)


def reprojection_inliers(T: Pose, pts_src: np.ndarray, uv_dst: np.ndarray, scales: np.ndarray,
                         intr, base_px: float) -> np.ndarray:
    uv, front = project_points(T.apply(pts_src), intr)
    err = np.linalg.norm(uv - uv_dst, axis=1)
    return front & (err < base_px * scales)


def verify_and_align(candidate: LoopCandidate, desc_query: PlaceDescriptor, desc_match: PlaceDescriptor, intr,
                     cfg: LoopConfig = LoopConfig(), rng: np.random.Generator | None = None) -> LoopCandidate:
    """Geometric check of a candidate; fills ``transform`` (match-local to query-local)."""
    rng = np.random.default_rng(0) if rng is None else rng
    m = match_features(desc_query, desc_match, cfg.max_hamming)
    candidate.n_matches = len(m)
    if len(m) < 3:
        candidate.reason = "too few matches"
        return candidate
    a = desc_match.points[m[:, 1]]
    b = desc_query.points[m[:, 0]]
    uv_b = desc_query.keypoints[m[:, 0]]
    sc = desc_query.scales[m[:, 0]]

    def inliers(T: Pose) -> np.ndarray:
        return reprojection_inliers(T, a, uv_b, sc, intr, cfg.inlier_px)

    res = ransac_align(a, b, inliers, rng, cfg.confidence, cfg.max_ransac_iterations, cfg.min_inliers)
    pose, mask = res.pose, res.inliers
    if pose is not None and cfg.refine_reprojection:
        pose, mask = refine_reprojection(pose, mask, a, uv_b, intr, inliers)
    candidate.n_inliers = int(mask.sum())
    candidate.transform = pose
    candidate.accepted = res.pose is not None and res.n_inliers >= cfg.min_inliers
    candidate.reason = "accepted" if candidate.accepted else "too few inliers"
    return candidate


def refine_reprojection(pose: Pose, mask: np.ndarray, pts: np.ndarray, uv: np.ndarray, intr,
                        inlier_fn) -> tuple[Pose, np.ndarray]:
    """Levenberg-Marquardt on the query-image reprojection error of the inliers.

    Depth noise grows with range along the optical axis, so the 3D fit is
    weakest exactly where the image measurement is strongest.  The refined
    pose is kept only if it does not lose inliers.
    """
    if mask.sum() < 6:
        return pose, mask
    rvec, _ = cv2.Rodrigues(pose.R)
    tvec = pose.t.reshape(3, 1).copy()
    ok, rvec, tvec = cv2.solvePnP(pts[mask].astype(np.float64), uv[mask].astype(np.float64), intr.K, None,
                                  rvec, tvec, useExtrinsicGuess=True, flags=cv2.SOLVEPNP_ITERATIVE)
    if not ok:
        return pose, mask
    refined = Pose(cv2.Rodrigues(rvec)[0], tvec.ravel())
    new_mask = inlier_fn(refined)
    if new_mask.sum() < mask.sum():
        return pose, mask
    return refined, new_mask


@dataclass
class ReuseDecision:
    action: str  # "reuse" | "close_loop" | "new_keyframe"
    keyframe_id: int | None = None
    state: TrackingState | None = None
    checked: list[dict] = field(default_factory=list)


def map_reuse_decision(frame: Frame, pose: Pose, candidates: Sequence[Keyframe], track_cfg: ResidualConfig,
                       cfg: LoopConfig = LoopConfig(), loop_possible: bool = False,
                       sigma_ph: tuple[float, ...] | None = None) -> ReuseDecision:
    """Pick the oldest candidate keyframe the frame re-tracks against cleanly.

    A candidate survives if, after re-tracking, at least ``reuse_overlap`` of
    its points are visible, the median photometric residual (gain 1, bias 0)
    is below ``reuse_sigmas * reuse_sigma_ph`` and the median geometric
    residual is below ``reuse_sigmas`` of its own standard deviations.
    """
    checked = []
    for kf in sorted(candidates, key=lambda k: k.id):
        info = {"keyframe": kf.id}
        checked.append(info)
        if overlap_fraction(kf, pose) < cfg.reuse_overlap:
            info["reject"] = "overlap before tracking"
            continue
        try:
            state, _ = track_frame(frame, kf, TrackingState(pose, reference_id=kf.id), track_cfg, sigma_ph)
        except TrackingLostError:
            info["reject"] = "tracking lost"
            continue
        ov = overlap_fraction(kf, state.pose)
        chk = alignment_residuals(frame, kf, state.pose, track_cfg.depth_guard)
        info.update(overlap=ov, photometric=chk.median_abs_photometric, geometric=chk.median_abs_geometric_sigmas)
        if (ov >= cfg.reuse_overlap and chk.median_abs_photometric < cfg.reuse_sigmas * cfg.reuse_sigma_ph
                and chk.median_abs_geometric_sigmas < cfg.reuse_sigmas):
            return ReuseDecision("reuse", kf.id, state, checked)
        info["reject"] = "residuals"
    return ReuseDecision("close_loop" if loop_possible else "new_keyframe", None, None, checked)


def reuse_candidates(frame_desc: np.ndarray, keyframes: Sequence[Keyframe], descriptors: dict[int, PlaceDescriptor],
                     exclude: set[int], cfg: LoopConfig = LoopConfig()) -> list[Keyframe]:
    """Keyframes whose appearance score against the frame reaches ``min_score``."""
    out = []
    for kf in keyframes:
        if kf.id in exclude or kf.id not in descriptors:
            continue
        if appearance_score(frame_desc, descriptors[kf.id].global_vec) >= cfg.min_score:
            out.append(kf)
    return out


def refine_alignment_with_tracking(frame: Frame, keyframe: Keyframe, pose_guess: Pose, cfg: ResidualConfig,
                                   sigma_ph: tuple[float, ...] | None = None) -> Pose | None:
    """Direct re-tracking seeded with a feature-based estimate; ``None`` if it fails."""
    try:
        state, _ = track_frame(frame, keyframe, TrackingState(pose_guess), cfg, sigma_ph)
    except TrackingLostError:
        return None
    return state.pose

