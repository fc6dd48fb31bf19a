"""Image pyramids, bilinear sampling, Canny edges and the frame container.

Pyramid level 0 is the coarsest; level ``n_levels - 1`` is the input
resolution.  A 640x480 input gives 80x60, 160x120, 320x240, 640x480.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage import feature

from .se3 import PinholeIntrinsics

N_LEVELS = 4
MIN_WIDTH, MIN_HEIGHT = 80, 60


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Luma ``0.299 R + 0.587 G + 0.114 B`` as float64 (input channel order RGB)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def crop_offsets(width: int, height: int, multiple: int = 2 ** (N_LEVELS - 1)) -> tuple[int, int, int, int]:
    """``(x0, y0, w, h)`` of the centered crop whose size is divisible by ``multiple``."""
    w = width - width % multiple
    h = height - height % multiple
    return (width - w) // 2, (height - h) // 2, w, h


def center_crop(img: np.ndarray, multiple: int = 2 ** (N_LEVELS - 1)) -> np.ndarray:
    x0, y0, w, h = crop_offsets(img.shape[1], img.shape[0], multiple)
    return img[y0:y0 + h, x0:x0 + w]


def downsample_box(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    return img[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def downsample_depth(depth: np.ndarray) -> np.ndarray:
    """Median of the valid (nonzero) depths in each 2x2 block; 0 where none are valid."""
    h, w = depth.shape
    blocks = depth[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2)
    blocks = blocks.transpose(0, 2, 1, 3).reshape(h // 2, w // 2, 4)
    masked = np.where(blocks > 0, blocks, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN blocks
        med = np.nanmedian(masked, axis=2)
    return np.nan_to_num(med, nan=0.0)


@dataclass(frozen=True)
class Pyramid:
    """Coarsest-first image pyramid."""

    levels: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> np.ndarray:
        return self.levels[level]


def build_pyramid(img: np.ndarray, n_levels: int = N_LEVELS) -> Pyramid:
    """2x2 box-filter pyramid. Input sizes not divisible by 8 are center-cropped."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[1] < MIN_WIDTH or img.shape[0] < MIN_HEIGHT:
        raise ValueError(f"image {img.shape[1]}x{img.shape[0]} smaller than {MIN_WIDTH}x{MIN_HEIGHT}")
    levels = [center_crop(img, 2 ** (n_levels - 1))]
    for _ in range(n_levels - 1):
        levels.append(downsample_box(levels[-1]))
    return Pyramid(tuple(levels[::-1]))


def build_depth_pyramid(depth: np.ndarray, n_levels: int = N_LEVELS) -> Pyramid:
    levels = [center_crop(np.asarray(depth, dtype=np.float64), 2 ** (n_levels - 1))]
    for _ in range(n_levels - 1):
        levels.append(downsample_depth(levels[-1]))
    return Pyramid(tuple(levels[::-1]))


def geometric_subsample(level: int) -> int:
    """Pixel stride of the dense geometric residual at ``level`` (0 = coarsest)."""
    if level not in range(N_LEVELS):
        raise ValueError(f"level must be in 0..{N_LEVELS - 1}")
    return level + 1


def interpolate(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear samples at float coordinates. Returns ``(values, valid)``;
    out-of-bounds samples are 0 and flagged invalid."""
    vals, _, _, valid = interpolate_with_gradient(img, u, v, gradient=False)
    return vals, valid


def interpolate_with_gradient(img: np.ndarray, u: np.ndarray, v: np.ndarray, gradient: bool = True):
    """Bilinear value plus its analytic partial derivatives ``(d/du, d/dv)``."""
    h, w = img.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    u0 = np.minimum(np.floor(uc).astype(np.intp), w - 2)
    v0 = np.minimum(np.floor(vc).astype(np.intp), h - 2)
    fu = uc - u0
    fv = vc - v0
    i00 = img[v0, u0]
    i01 = img[v0, u0 + 1]
    i10 = img[v0 + 1, u0]
    i11 = img[v0 + 1, u0 + 1]
    top = i00 + fu * (i01 - i00)
    bot = i10 + fu * (i11 - i10)
    vals = np.where(valid, top + fv * (bot - top), 0.0)
    if not gradient:
        return vals, None, None, valid
    du = (i01 - i00) + fv * ((i11 - i10) - (i01 - i00))
    dv = bot - top
    return vals, np.where(valid, du, 0.0), np.where(valid, dv, 0.0), valid


def sample_bilinear(img: np.ndarray, u: float, v: float) -> float:
    vals, valid = interpolate(img, np.array([u]), np.array([v]))
    if not valid[0]:
        raise IndexError(f"({u}, {v}) outside {img.shape[1]}x{img.shape[0]} image")
    return float(vals[0])


def image_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences ``(d/du, d/dv)``; one-sided at the borders."""
    gv, gu = np.gradient(img)
    return gu, gv


@dataclass(frozen=True)
class EdgeMask:
    pixels: np.ndarray  # (N, 2) integer (u, v)
    magnitude: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.magnitude)


def canny_edges(
    img: np.ndarray,
    budget: int = 8000,
    sigma: float = 1.5,
    low_quantile: float = 0.7,
    high_quantile: float = 0.9,
    min_gradient: float = 2.0,
) -> EdgeMask:
    """Canny edge pixels, capped at ``budget`` by descending gradient magnitude.

    Hysteresis thresholds are quantiles of the gradient magnitude so they are
    exposure independent. ``min_gradient`` (intensity per pixel, measured on the
    blurred image) removes edges traced through sensor noise on flat regions.
    """
    img = np.asarray(img, dtype=np.float64)
    edges = feature.canny(
        img, sigma=sigma, low_threshold=low_quantile, high_threshold=high_quantile,
        use_quantiles=True, mode="nearest",
    )
    smooth = ndimage.gaussian_filter(img, sigma, mode="nearest")
    gu, gv = image_gradient(smooth)
    mag = np.hypot(gu, gv)
    edges &= mag >= min_gradient
    edges[[0, -1], :] = False
    edges[:, [0, -1]] = False
    vs, us = np.nonzero(edges)
    m = mag[vs, us]
    if len(m) > budget:
        # stable sort keeps row-major order among equal magnitudes
        keep = np.sort(np.argsort(-m, kind="stable")[:budget])
        vs, us, m = vs[keep], us[keep], m[keep]
    return EdgeMask(np.stack([us, vs], axis=1).astype(np.intp), m)


@dataclass(frozen=True, eq=False)
class Frame:
    """Timestamped gray, depth and inverse-depth pyramids (coarsest first)."""

    timestamp: float
    gray: Pyramid
    depth: Pyramid
    inv_depth: Pyramid
    intrinsics: tuple[PinholeIntrinsics, ...]
    index: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_levels(self) -> int:
        return len(self.gray)

    @property
    def finest(self) -> int:
        return len(self.gray) - 1

    @classmethod
    def from_images(
        cls,
        gray: np.ndarray,
        depth_m: np.ndarray,
        intr: PinholeIntrinsics,
        timestamp: float = 0.0,
        index: int = 0,
        min_depth: float = 0.3,
        max_depth: float = 7.0,
        n_levels: int = N_LEVELS,
    ) -> Frame:
        """Build pyramids; depths outside ``[min_depth, max_depth]`` become invalid (0)."""
        gray = np.asarray(gray, dtype=np.float64)
        depth = np.asarray(depth_m, dtype=np.float64)
        if gray.shape != depth.shape:
            raise ValueError(f"gray {gray.shape} and depth {depth.shape} differ in size")
        if (intr.width, intr.height) != (gray.shape[1], gray.shape[0]):
            raise ValueError("intrinsics do not match image size")
        depth = np.where((depth >= min_depth) & (depth <= max_depth), depth, 0.0)
        x0, y0, w, h = crop_offsets(gray.shape[1], gray.shape[0], 2 ** (n_levels - 1))
        base = intr.cropped(x0, y0, w, h) if (w, h) != (intr.width, intr.height) else intr
        gp = build_pyramid(gray, n_levels)
        dp = build_depth_pyramid(depth, n_levels)
        # inverse depth gets its own median pyramid so coarse levels match keyframe point maps
        fine = dp.levels[-1]
        ip = build_depth_pyramid(np.where(fine > 0, 1.0 / np.where(fine > 0, fine, 1.0), 0.0), n_levels)
        intrs = tuple(base.scaled(n_levels - 1 - lvl) for lvl in range(n_levels))
        return cls(timestamp, gp, dp, ip, intrs, index)
