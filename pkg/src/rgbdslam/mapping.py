"""Keyframes, their point sets, multi-view inverse depth and sensor fusion.

Every keyframe carries a finest-level inverse-depth map built only from its
own sensor depth and from frames observed while it was the tracking
reference; maps of different keyframes are never fused together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import cv2
import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from .image import (
    EdgeMask, Frame, canny_edges, downsample_depth, geometric_subsample, image_gradient,
    interpolate,
)
from .se3 import (
    InverseDepthEstimate, PinholeIntrinsics, Pose, backproject_points, project_points,
    sigma_inverse_depth,
)

SENSOR, MULTIVIEW, FUSED = 0, 1, 2


MIN_OVERLAP_POINTS = 100


@dataclass(frozen=True)
class EdgeConfig:
    budget: int = 8000
    sigma: float = 1.5
    low_quantile: float = 0.7
    high_quantile: float = 0.9
    min_gradient: float = 2.0
    max_depth_jump: float = 0.2  # relative inverse-depth range in 3x3 beyond which an edge pixel is an occlusion
    # bilateral denoising of the keyframe's sensor inverse depth (0 disables)
    depth_filter_diameter: int = 5
    depth_filter_range: float = 3.0
    depth_filter_sigma_scale: float = 1.0
    min_sigma: float = 0.5

    def level_sigma(self, level: int, n_levels: int) -> float:
        """Canny blur per level: box downsampling already smooths coarse levels, so sigma halves per octave."""
        return max(self.min_sigma, self.sigma / 2.0 ** (n_levels - 1 - level))


@dataclass(frozen=True)
class MappingConfig:
    overlap_threshold: float = 0.80
    max_translation: float = 0.25
    max_rotation_deg: float = 15.0
    min_inverse_depth: float = 0.02
    max_inverse_depth: float = 10.0
    n_samples: int = 64
    max_samples: int = 512
    sample_step_px: float = 2.0
    refine_samples: int = 17
    prior_sigmas: float = 3.0
    ambiguity_ratio: float = 1.3
    max_views: int = 5
    min_views: int = 2
    min_baseline: float = 0.01
    patch_size: int = 5
    match_sigma_px: float = 0.5
    chunk: int = 1024


@dataclass(frozen=True, eq=False)
class PointSet:
    """Struct-of-arrays map points at one pyramid level.

    ``points`` are keyframe-local 3D coordinates; ``grad`` is the central
    difference intensity gradient of the keyframe image at ``pixels``.
    """

    pixels: np.ndarray
    rho: np.ndarray
    sigma: np.ndarray
    intensity: np.ndarray
    grad: np.ndarray
    points: np.ndarray
    source: np.ndarray

    def __len__(self) -> int:
        return len(self.rho)

    @classmethod
    def empty(cls) -> PointSet:
        z = np.zeros(0)
        return cls(np.zeros((0, 2)), z, z, z, np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0, np.int8))


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel inverse depth with std and source code; ``rho == 0`` is empty."""

    rho: np.ndarray
    sigma: np.ndarray
    source: np.ndarray

    @classmethod
    def from_sensor(cls, inv_depth: np.ndarray, intr: PinholeIntrinsics, filter_diameter: int = 0,
                    filter_range: float = 3.0, filter_sigma_scale: float = 1.0) -> DepthMap:
        """Sensor map, optionally denoised by a bilateral filter.

        The range kernel is ``filter_range`` inverse-depth standard deviations
        wide, so neighbours across a depth jump barely contribute.  Filtered
        values carry ``filter_sigma_scale`` times the sensor standard deviation.
        """
        valid = inv_depth > 0
        sig = sigma_inverse_depth(intr)
        rho = inv_depth.copy()
        if filter_diameter > 0:
            smooth = cv2.bilateralFilter(inv_depth.astype(np.float32), filter_diameter, filter_range * sig,
                                         filter_diameter / 2.0)
            rho = np.where(valid, smooth.astype(np.float64), 0.0)
            sig *= filter_sigma_scale
        return cls(rho, np.where(valid, sig, 0.0), np.zeros(inv_depth.shape, np.int8))

    def downsample(self) -> DepthMap:
        # sigma doubles per octave: the same disparity std over half the focal length
        rho = downsample_depth(self.rho)
        sig = 2.0 * downsample_depth(self.sigma)
        h, w = rho.shape
        src = self.source[: 2 * h, : 2 * w].reshape(h, 2, w, 2)
        valid = self.rho[: 2 * h, : 2 * w].reshape(h, 2, w, 2) > 0
        src = np.where(valid, src, -1).max(axis=(1, 3)).clip(0).astype(np.int8)
        return DepthMap(rho, np.where(rho > 0, sig, 0.0), src)


def _point_set(img: np.ndarray, gu: np.ndarray, gv: np.ndarray, dmap: DepthMap,
               us: np.ndarray, vs: np.ndarray, intr: PinholeIntrinsics) -> PointSet:
    rho = dmap.rho[vs, us]
    ok = rho > 0
    us, vs, rho = us[ok], vs[ok], rho[ok]
    pix = np.stack([us, vs], axis=1).astype(np.float64)
    return PointSet(
        pixels=pix,
        rho=rho,
        sigma=dmap.sigma[vs, us],
        intensity=img[vs, us],
        grad=np.stack([gu[vs, us], gv[vs, us]], axis=1),
        points=backproject_points(pix, rho, intr),
        source=dmap.source[vs, us],
    )


@dataclass(frozen=True, eq=False)
class KeyframeData:
    """Immutable per-keyframe image data and point sets; shared across pose updates."""

    frame: Frame
    depth_maps: tuple[DepthMap, ...]
    edges: tuple[EdgeMask, ...]
    max_depth_jump: float = 0.2

    @cached_property
    def gradients(self):
        return tuple(image_gradient(g) for g in self.frame.gray.levels)

    def _grid(self, level: int, stride: int) -> PointSet:
        h, w = self.frame.gray[level].shape
        vs, us = np.mgrid[0:h:stride, 0:w:stride]
        gu, gv = self.gradients[level]
        return _point_set(self.frame.gray[level], gu, gv, self.depth_maps[level],
                          us.ravel(), vs.ravel(), self.frame.intrinsics[level])

    def depth_discontinuity(self, level: int) -> np.ndarray:
        """Pixels whose valid 3x3 inverse-depth neighbours spread beyond
        ``max_depth_jump`` of their own value plus six standard deviations of noise."""
        dm = self.depth_maps[level]
        rho = dm.rho
        hi = maximum_filter(rho, 3)
        lo = minimum_filter(np.where(rho > 0, rho, np.inf), 3)
        # stored sigma doubles per octave (pixel units); block medians are no noisier than the finest level
        noise = dm.sigma / 2.0 ** (len(self.depth_maps) - 1 - level)
        return (rho > 0) & (hi - lo > self.max_depth_jump * rho + 6.0 * noise)

    @cached_property
    def photometric(self) -> tuple[PointSet, ...]:
        # edge pixels on occluding contours have no single depth; they are left out
        out = []
        for lvl, e in enumerate(self.edges):
            gu, gv = self.gradients[lvl]
            us, vs = e.pixels[:, 0], e.pixels[:, 1]
            keep = ~self.depth_discontinuity(lvl)[vs, us]
            out.append(_point_set(self.frame.gray[lvl], gu, gv, self.depth_maps[lvl],
                                  us[keep], vs[keep], self.frame.intrinsics[lvl]))
        return tuple(out)

    @cached_property
    def geometric(self) -> tuple[PointSet, ...]:
        return tuple(self._grid(lvl, geometric_subsample(lvl)) for lvl in range(self.frame.n_levels))

    @cached_property
    def dense(self) -> tuple[PointSet, ...]:
        return tuple(self._grid(lvl, 1) for lvl in range(self.frame.n_levels))

    @cached_property
    def dense_photometric(self) -> tuple[PointSet, ...]:
        """All interior pixels with an inverse depth (photometric dense mode)."""
        out = []
        for lvl in range(self.frame.n_levels):
            h, w = self.frame.gray[lvl].shape
            vs, us = np.mgrid[1:h - 1, 1:w - 1]
            gu, gv = self.gradients[lvl]
            out.append(_point_set(self.frame.gray[lvl], gu, gv, self.depth_maps[lvl],
                                  us.ravel(), vs.ravel(), self.frame.intrinsics[lvl]))
        return tuple(out)


@dataclass(frozen=True, eq=False)
class Keyframe:
    id: int
    pose: Pose  # camera-to-world
    data: KeyframeData
    fused: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def frame(self) -> Frame:
        return self.data.frame

    @property
    def timestamp(self) -> float:
        return self.data.frame.timestamp

    @property
    def photometric(self) -> tuple[PointSet, ...]:
        return self.data.photometric

    @property
    def geometric(self) -> tuple[PointSet, ...]:
        return self.data.geometric

    def with_pose(self, pose: Pose) -> Keyframe:
        return replace(self, pose=pose)


def build_depth_maps(finest: DepthMap, n_levels: int) -> tuple[DepthMap, ...]:
    maps = [finest]
    for _ in range(n_levels - 1):
        maps.append(maps[-1].downsample())
    return tuple(maps[::-1])


def make_keyframe(kf_id: int, frame: Frame, pose: Pose, edge_cfg: EdgeConfig = EdgeConfig(),
                  finest_map: DepthMap | None = None, edges: tuple[EdgeMask, ...] | None = None) -> Keyframe:
    """Keyframe with sensor-only depth unless a fused finest-level map is supplied."""
    f = frame.finest
    if finest_map is None:
        finest_map = DepthMap.from_sensor(frame.inv_depth[f], frame.intrinsics[f], edge_cfg.depth_filter_diameter,
                                          edge_cfg.depth_filter_range, edge_cfg.depth_filter_sigma_scale)
    if edges is None:
        edges = tuple(
            canny_edges(g, edge_cfg.budget, edge_cfg.level_sigma(lvl, frame.n_levels), edge_cfg.low_quantile,
                        edge_cfg.high_quantile, edge_cfg.min_gradient)
            for lvl, g in enumerate(frame.gray.levels)
        )
    data = KeyframeData(frame, build_depth_maps(finest_map, frame.n_levels), edges, edge_cfg.max_depth_jump)
    return Keyframe(kf_id, pose, data, fused=bool((finest_map.source > 0).any()))


def build_geometric_grid(keyframe: Keyframe) -> tuple[PointSet, ...]:
    return keyframe.data.geometric


def overlap_fraction(keyframe: Keyframe, pose: Pose, intr: PinholeIntrinsics | None = None) -> float:
    """Share of the keyframe's finest semi-dense points visible from camera ``pose``.

    A keyframe with too few edge points (a texture-less view) is measured
    with its subsampled geometric grid instead.
    """
    ps = keyframe.photometric[-1]
    if len(ps) < MIN_OVERLAP_POINTS:
        ps = keyframe.geometric[-1]
    if len(ps) == 0:
        return 0.0
    intr = intr or keyframe.frame.intrinsics[-1]
    rel = pose.inverse().compose(keyframe.pose)
    uv, front = project_points(rel.apply(ps.points), intr)
    inside = front & (uv[:, 0] >= 0) & (uv[:, 0] <= intr.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= intr.height - 1)
    return float(inside.mean())


def should_create_keyframe(pose: Pose, keyframe: Keyframe, cfg: MappingConfig = MappingConfig()) -> tuple[bool, float]:
    """New keyframe when overlap drops below threshold or motion exceeds the caps."""
    overlap = overlap_fraction(keyframe, pose)
    rel = keyframe.pose.inverse().compose(pose)
    moved = float(np.linalg.norm(rel.t)) > cfg.max_translation
    turned = rel.rotation_angle() > math.radians(cfg.max_rotation_deg)
    return (overlap < cfg.overlap_threshold) or moved or turned, overlap


def fuse_estimates(rho1: InverseDepthEstimate | None, rho2: InverseDepthEstimate | None) -> InverseDepthEstimate | None:
    """Inverse-variance fusion of a sensor and a multi-view estimate.

    The combined spread ``1 / sum(1/sigma_j^2)`` is a variance; the returned
    ``sigma`` is its square root so that it stays a standard deviation.
    """
    if rho1 is None:
        return rho2
    if rho2 is None:
        return rho1
    w1, w2 = 1.0 / rho1.sigma ** 2, 1.0 / rho2.sigma ** 2
    var = 1.0 / (w1 + w2)
    return InverseDepthEstimate((rho1.rho * w1 + rho2.rho * w2) * var, math.sqrt(var))


def fuse_arrays(rho1, sigma1, rho2, sigma2):
    """Vectorized :func:`fuse_estimates` for entries where both estimates exist."""
    w1, w2 = 1.0 / np.square(sigma1), 1.0 / np.square(sigma2)
    var = 1.0 / (w1 + w2)
    return (rho1 * w1 + rho2 * w2) * var, np.sqrt(var)


@dataclass
class MultiviewResult:
    pixels: np.ndarray  # (N, 2) integer finest-level pixels that were searched
    rho: np.ndarray  # 0 where rejected
    sigma: np.ndarray
    accepted: np.ndarray
    spacing: np.ndarray  # coarse inverse-depth sample spacing per pixel
    baseline: np.ndarray  # effective baseline used for sigma
    reason: np.ndarray  # 0 ok, 1 no view, 2 boundary, 3 ambiguous, 4 flat epipolar

    def estimates(self) -> dict[tuple[int, int], InverseDepthEstimate]:
        return {
            (int(u), int(v)): InverseDepthEstimate(float(r), float(s))
            for (u, v), r, s, ok in zip(self.pixels, self.rho, self.sigma, self.accepted) if ok
        }


def select_views(kf_pose: Pose, views: Sequence[tuple[np.ndarray, Pose]], cfg: MappingConfig):
    """Views with enough parallax, at most ``max_views`` spread over the baseline range.

    Returns ``(image, T_view_from_kf, baseline)`` triples, widest baseline first.
    """
    cands = []
    for img, pose in views:
        rel = pose.inverse().compose(kf_pose)
        b = float(np.linalg.norm(rel.inverse().t))
        if b > cfg.min_baseline:
            cands.append((img, rel, b))
    if len(cands) < cfg.min_views:
        return []
    cands.sort(key=lambda c: c[2])
    if len(cands) > cfg.max_views:
        idx = np.unique(np.rint(np.linspace(0, len(cands) - 1, cfg.max_views)).astype(int))
        cands = [cands[i] for i in idx]
    return cands[::-1]


def _profile(kf_img, intr, pix, direction, rho_samples, views, min_support=1):
    """SSD cost ``(N, S)`` of the 1-D template for every inverse-depth sample.

    Views where a template sample leaves the image are left out of that
    entry and the remaining views are rescaled to the full view count.
    Entries seen by fewer than ``min_support`` views cost infinity, so a
    single view cannot outvote the rest at depths the others cannot see.
    """
    n, s = rho_samples.shape
    half = 2
    offs = np.arange(-half, half + 1, dtype=np.float64)
    tu = pix[:, 0:1] + offs[None] * direction[:, 0:1]  # (N, P)
    tv = pix[:, 1:2] + offs[None] * direction[:, 1:2]
    tmpl, tvalid = interpolate(kf_img, tu, tv)
    rays = np.stack([(tu - intr.cx) / intr.fx, (tv - intr.cy) / intr.fy, np.ones_like(tu)], axis=-1)  # (N,P,3)
    total = np.zeros((n, s))
    count = np.zeros((n, s))
    largest = np.zeros((n, s))
    for img, rel, b in views:
        # keyframe point X = ray / rho ; view point = R X + t
        rr = rays @ rel.R.T  # (N,P,3)
        q = rr[:, None, :, :] / rho_samples[:, :, None, None] + rel.t  # (N,S,P,3)
        z = q[..., 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        u = intr.fx * q[..., 0] / zs + intr.cx
        v = intr.fy * q[..., 1] / zs + intr.cy
        vals, ok = interpolate(img, u, v)
        ok &= front
        ssd = np.square(vals - tmpl[:, None, :]).sum(axis=2)
        good = ok.all(axis=2) & tvalid.all(axis=1)[:, None]
        total += np.where(good, ssd, 0.0)
        count += good
        largest = np.where(good, np.maximum(largest, b), largest)
    with np.errstate(invalid="ignore", divide="ignore"):
        cost = np.where(count >= max(1, min_support), total / count * len(views), np.inf)
    return cost, largest


def _epipolar_direction(pix, intr, center):
    """Unit image direction of the epipolar line through ``pix`` for a second
    camera centered at ``center`` (keyframe coordinates)."""
    xn = (pix[:, 0] - intr.cx) / intr.fx
    yn = (pix[:, 1] - intr.cy) / intr.fy
    d = np.stack([intr.fx * (center[0] - xn * center[2]), intr.fy * (center[1] - yn * center[2])], axis=1)
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    return d / np.where(norm > 0, norm, 1.0), norm[:, 0]


def triangulate_pixels(
    kf_img: np.ndarray,
    kf_pose: Pose,
    intr: PinholeIntrinsics,
    pixels: np.ndarray,
    views: Sequence[tuple[np.ndarray, Pose]],
    prior_rho: np.ndarray | None = None,
    prior_sigma: np.ndarray | None = None,
    cfg: MappingConfig = MappingConfig(),
) -> MultiviewResult:
    """Multi-view inverse depth for keyframe pixels by 1-D template search.

    For each pixel a 5-sample template along the epipolar line of the widest
    view is back-projected at every candidate inverse depth, projected into
    all views and compared by SSD summed over views.  The coarse minimum is
    refined on a finer grid and by a parabola fit.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(pixels)
    res = MultiviewResult(pixels.astype(np.intp), np.zeros(n), np.zeros(n), np.zeros(n, bool),
                          np.zeros(n), np.zeros(n), np.ones(n, np.int8))
    sel = select_views(kf_pose, views, cfg)
    if not sel or n == 0:
        return res
    ref_center = sel[0][1].inverse().t
    direction, dnorm = _epipolar_direction(pixels, intr, ref_center)
    flat = dnorm < 1e-9
    res.reason[flat] = 4
    if prior_rho is None:
        prior_rho = np.zeros(n)
        prior_sigma = np.zeros(n)
    has_prior = (prior_rho > 0) & ~flat
    b_ref = sel[0][2]
    full_span = cfg.max_inverse_depth - cfg.min_inverse_depth
    n_full = int(np.clip(math.ceil(intr.fx * b_ref * full_span / cfg.sample_step_px), cfg.n_samples, cfg.max_samples))
    for group, n_s in ((has_prior, cfg.n_samples), (~has_prior & ~flat, n_full)):
        idx = np.nonzero(group)[0]
        for start in range(0, len(idx), max(1, cfg.chunk * 64 // n_s)):
            ii = idx[start:start + max(1, cfg.chunk * 64 // n_s)]
            if group is has_prior:
                lo = np.maximum(cfg.min_inverse_depth, prior_rho[ii] - cfg.prior_sigmas * prior_sigma[ii])
                hi = np.minimum(cfg.max_inverse_depth, prior_rho[ii] + cfg.prior_sigmas * prior_sigma[ii])
            else:
                lo = np.full(len(ii), cfg.min_inverse_depth)
                hi = np.full(len(ii), cfg.max_inverse_depth)
            _search(res, ii, kf_img, intr, pixels[ii], direction[ii], lo, hi, n_s, sel, cfg)
    return res


def _search(res, ii, kf_img, intr, pix, direction, lo, hi, n_s, views, cfg):
    t = np.linspace(0.0, 1.0, n_s)
    samples = lo[:, None] + (hi - lo)[:, None] * t[None]
    step = (hi - lo) / (n_s - 1)
    support = min(cfg.min_views, len(views))
    cost, _ = _profile(kf_img, intr, pix, direction, samples, views, support)
    rows = np.arange(len(ii))
    best = np.argmin(cost, axis=1)
    bcost = cost[rows, best]
    interior = (best > 0) & (best < n_s - 1) & np.isfinite(bcost)
    # a minimum next to an unsupported sample is where the profile was cut off, not a true minimum
    lo_n, hi_n = np.clip(best - 1, 0, n_s - 1), np.clip(best + 1, 0, n_s - 1)
    interior &= np.isfinite(cost[rows, lo_n]) & np.isfinite(cost[rows, hi_n])
    # strict local minima other than the best
    c = cost
    locmin = np.zeros_like(c, dtype=bool)
    locmin[:, 1:-1] = (c[:, 1:-1] < c[:, :-2]) & (c[:, 1:-1] <= c[:, 2:])
    locmin[rows, best] = False
    second = np.where(locmin, c, np.inf).min(axis=1)
    ambiguous = second <= cfg.ambiguity_ratio * bcost
    ok = interior & ~ambiguous
    res.reason[ii] = np.where(~interior, 2, np.where(ambiguous, 3, 0))
    res.spacing[ii] = step
    if not ok.any():
        return
    k = np.nonzero(ok)[0]
    center = samples[k, best[k]]
    m = cfg.refine_samples
    fine_t = np.linspace(-1.0, 1.0, m)
    fine = center[:, None] + step[k, None] * fine_t[None]
    fcost, fbase = _profile(kf_img, intr, pix[k], direction[k], fine, views, support)
    fb = np.argmin(fcost, axis=1)
    fb = np.clip(fb, 1, m - 2)
    r = np.arange(len(k))
    c0, cm, cp = fcost[r, fb], fcost[r, fb - 1], fcost[r, fb + 1]
    denom = cm - 2 * c0 + cp
    with np.errstate(invalid="ignore", divide="ignore"):
        off = np.where(denom > 0, 0.5 * (cm - cp) / denom, 0.0)
    off = np.clip(np.nan_to_num(off), -0.5, 0.5)
    fstep = 2 * step[k] / (m - 1)
    rho = fine[r, fb] + off * fstep
    base = fbase[r, fb]
    good = (rho > 0) & (base > 0) & np.isfinite(c0)
    tgt = ii[k]
    res.rho[tgt] = np.where(good, rho, 0.0)
    res.baseline[tgt] = base
    with np.errstate(divide="ignore"):
        res.sigma[tgt] = np.where(good, cfg.match_sigma_px / (intr.fx * np.where(base > 0, base, 1.0)), 0.0)
    res.accepted[tgt] = good
    res.reason[tgt[~good]] = 1


def triangulate_multiview(keyframe: Keyframe, overlapping: Sequence[tuple[Frame, Pose]],
                          cfg: MappingConfig = MappingConfig()) -> MultiviewResult:
    """Multi-view estimates for the keyframe's finest Canny pixels.

    ``overlapping`` holds frames tracked against this keyframe with their
    camera-to-world poses.
    """
    f = keyframe.frame.finest
    sensor = keyframe.data.depth_maps[f]
    pix = keyframe.data.edges[f].pixels
    prior = sensor.rho[pix[:, 1], pix[:, 0]] if len(pix) else np.zeros(0)
    sigma = sensor.sigma[pix[:, 1], pix[:, 0]] if len(pix) else np.zeros(0)
    sensor_only = sensor.source[pix[:, 1], pix[:, 0]] == SENSOR if len(pix) else np.zeros(0, bool)
    prior = np.where(sensor_only, prior, 0.0)
    views = [(fr.gray[fr.finest], pose) for fr, pose in overlapping]
    return triangulate_pixels(keyframe.frame.gray[f], keyframe.pose, keyframe.frame.intrinsics[f],
                              pix, views, prior, sigma, cfg)


def fuse_keyframe(keyframe: Keyframe, result: MultiviewResult, edge_cfg: EdgeConfig = EdgeConfig()) -> Keyframe:
    """New keyframe snapshot whose finest map merges sensor and multi-view depth."""
    f = keyframe.frame.finest
    sensor = keyframe.data.depth_maps[f]
    rho, sig, src = sensor.rho.copy(), sensor.sigma.copy(), sensor.source.copy()
    ok = result.accepted
    u, v = result.pixels[ok, 0], result.pixels[ok, 1]
    r2, s2 = result.rho[ok], result.sigma[ok]
    r1, s1 = rho[v, u], sig[v, u]
    both = r1 > 0
    fr, fs = fuse_arrays(r1[both], s1[both], r2[both], s2[both])
    rho[v[both], u[both]], sig[v[both], u[both]], src[v[both], u[both]] = fr, fs, FUSED
    rho[v[~both], u[~both]], sig[v[~both], u[~both]], src[v[~both], u[~both]] = r2[~both], s2[~both], MULTIVIEW
    fused = make_keyframe(keyframe.id, keyframe.frame, keyframe.pose, edge_cfg,
                          DepthMap(rho, sig, src), keyframe.data.edges)
    return replace(fused, fused=True, meta=dict(keyframe.meta))
