"""Oracles shared by the test modules: analytic images, point sets and cached renders."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from rgbdslam.image import Frame
from rgbdslam.mapping import PointSet
from rgbdslam.se3 import PinholeIntrinsics, Pose, backproject_points, log_rotation
from rgbdslam.synthetic import NoiseModel, Rect, SceneSpec, Texture, TrajectorySpec, render_views, scene_by_name

SMALL = PinholeIntrinsics(262.5, 262.5, 159.5, 119.5, 320, 240)


class SmoothImage:
    """Band-limited analytic intensity with exact gradient."""

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.k = rng.uniform(0.02, 0.12, (4, 2))
        self.phase = rng.uniform(0, 2 * np.pi, 4)
        self.amp = rng.uniform(10, 40, 4)

    def __call__(self, u, v):
        arg = np.multiply.outer(u, self.k[:, 0]) + np.multiply.outer(v, self.k[:, 1]) + self.phase
        return 128.0 + (self.amp * np.sin(arg)).sum(axis=-1)

    def gradient(self, u, v):
        arg = np.multiply.outer(u, self.k[:, 0]) + np.multiply.outer(v, self.k[:, 1]) + self.phase
        c = self.amp * np.cos(arg)
        return (c * self.k[:, 0]).sum(axis=-1), (c * self.k[:, 1]).sum(axis=-1)

    def raster(self, width: int, height: int) -> np.ndarray:
        v, u = np.mgrid[0:height, 0:width].astype(np.float64)
        return self(u, v)


def point_set(uv: np.ndarray, rho: np.ndarray, intr: PinholeIntrinsics, intensity=None, grad=None,
              sigma: float | np.ndarray = 0.01) -> PointSet:
    uv = np.asarray(uv, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    n = len(rho)
    return PointSet(
        pixels=uv,
        rho=rho,
        sigma=np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,)).copy(),
        intensity=np.zeros(n) if intensity is None else np.asarray(intensity, dtype=np.float64),
        grad=np.zeros((n, 2)) if grad is None else np.asarray(grad, dtype=np.float64),
        points=backproject_points(uv, rho, intr),
        source=np.zeros(n, np.int8),
    )


def central_difference(f, x0: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Jacobian of vector function ``f`` at ``x0``, one column per coordinate."""
    cols = []
    for k in range(len(x0)):
        d = np.zeros_like(x0)
        d[k] = step
        cols.append((f(x0 + d) - f(x0 - d)) / (2 * step))
    return np.stack(cols, axis=-1)


WALL_SPEC = SceneSpec("wall", rects=(Rect(2, 2.0, (-10.0, -10.0), (10.0, 10.0), Texture("noise", seed=3)),),
                      trajectory=TrajectorySpec("static", 1), seed=9)


def render_frames(spec: SceneSpec, poses, quantize: bool = False, gray_map=None) -> list[Frame]:
    """Frames of ``poses``; ``gray_map`` (if given) is applied to every frame after the first."""
    seq = render_views(spec, poses, quantize=quantize)
    out = []
    for i in range(len(seq)):
        if gray_map is None or i == 0:
            out.append(seq.frame(i))
        else:
            out.append(Frame.from_images(gray_map(seq.gray[i]), seq.depth[i], spec.intrinsics, seq.timestamps[i], i))
    return out


@lru_cache(maxsize=None)
def noiseless(name: str) -> SceneSpec:
    return scene_by_name(name, NoiseModel())


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation error in meters, rotation error in degrees)."""
    d = a.inverse().compose(b)
    # the log map keeps precision near zero where arccos of the trace does not
    return float(np.linalg.norm(d.t)), float(np.degrees(np.linalg.norm(log_rotation(d.R))))
