"""Ray-cast RGB-D sequences with exact ground truth.

Scenes are unions of textured axis-aligned rectangles and solid boxes.  Each
pixel ray takes the nearest hit; the texture value is the intensity (no
shading).  Depth is corrupted through the structured-light disparity model
``d = f b / z + N(0, sigma_d)`` so the noise has the same structure the
tracker assumes.  World axes follow the camera convention: y points down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import DEPTH_SCALE, encode_depth, frame_from_raw, write_sequence
from .image import N_LEVELS, Frame
from .se3 import PinholeIntrinsics, Pose, exp_so3

SYNTHETIC_INTRINSICS = PinholeIntrinsics(262.5, 262.5, 159.5, 119.5, 320, 240)
MIN_COVERAGE = 0.3


class DegenerateSceneError(ValueError):
    pass


@dataclass(frozen=True)
class Texture:
    """Procedural texture over in-plane coordinates ``(s, t)`` in meters.

    ``noise`` is a seeded sum of sinusoids (smooth, band-limited), ``checker``
    a hard-edged checkerboard, ``constant`` a flat value.
    """

    kind: str = "noise"
    seed: int = 0
    mean: float = 128.0
    amplitude: float = 90.0
    min_wavelength: float = 0.15
    max_wavelength: float = 0.6
    n_components: int = 12
    square: float = 0.25

    def _components(self):
        rng = np.random.default_rng(self.seed)
        k = self.n_components
        phi = rng.uniform(0, math.pi, k)
        lam = np.exp(rng.uniform(math.log(self.min_wavelength), math.log(self.max_wavelength), k))
        psi = rng.uniform(0, 2 * math.pi, k)
        w = rng.uniform(0.5, 1.0, k)
        return phi, lam, psi, self.amplitude * w / w.sum()

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.full(np.shape(s), self.mean)
        if self.kind == "checker":
            parity = (np.floor(s / self.square) + np.floor(t / self.square)) % 2
            return self.mean + self.amplitude * (parity - 0.5)
        if self.kind != "noise":
            raise ValueError(f"unknown texture {self.kind!r}")
        out = np.full(np.shape(s), self.mean)
        for phi, lam, psi, a in zip(*self._components()):
            out = out + a * np.sin(2 * math.pi * (s * math.cos(phi) + t * math.sin(phi)) / lam + psi)
        return out


@dataclass(frozen=True)
class Rect:
    """Rectangle on the plane ``x[axis] == offset`` bounded in the other two axes
    (listed in increasing axis order)."""

    axis: int
    offset: float
    lo: tuple[float, float]
    hi: tuple[float, float]
    texture: Texture = Texture()


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    texture: Texture = Texture()

    def faces(self) -> list[Rect]:
        c = np.asarray(self.center, dtype=float)
        h = np.asarray(self.size, dtype=float) / 2
        rects = []
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            lo = tuple(float(c[a] - h[a]) for a in others)
            hi = tuple(float(c[a] + h[a]) for a in others)
            for sign in (-1, 1):
                tex = replace(self.texture, seed=self.texture.seed * 7 + 2 * axis + (sign > 0))
                rects.append(Rect(axis, float(c[axis] + sign * h[axis]), lo, hi, tex))
        return rects

    def contains(self, p: np.ndarray) -> bool:
        return bool(np.all(np.abs(np.asarray(p) - self.center) < np.asarray(self.size) / 2))


@dataclass(frozen=True)
class NoiseModel:
    intensity_sigma: float = 0.0
    disparity_sigma: float = 0.0
    dropout: float = 0.0


@dataclass(frozen=True)
class TrajectorySpec:
    """Parametric camera path.

    kinds: ``static``, ``translation`` (start -> end), ``rotation`` (about
    ``axis`` by ``angle`` at ``center``), ``circle`` (horizontal circle looking
    at ``target``), ``loop`` (outward-facing full turn around ``center``,
    ending next to the starting view).
    """

    kind: str
    n_frames: int
    start: tuple[float, float, float] = (0.0, 0.0, 0.0)
    end: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.3
    target: tuple[float, float, float] = (0.0, 0.0, 3.0)
    axis: tuple[float, float, float] = (0.0, 1.0, 0.0)
    angle: float = 0.0
    fps: float = 30.0

    def poses(self) -> list[Pose]:
        n = self.n_frames
        out = []
        for i in range(n):
            s = i / max(n - 1, 1)
            if self.kind == "static":
                out.append(Pose(np.eye(3), self.start))
            elif self.kind == "translation":
                p = (1 - s) * np.asarray(self.start) + s * np.asarray(self.end)
                out.append(Pose(np.eye(3), p))
            elif self.kind == "rotation":
                ax = np.asarray(self.axis, dtype=float)
                out.append(Pose(exp_so3(ax / np.linalg.norm(ax) * self.angle * s), self.center))
            elif self.kind == "circle":
                th = 2 * math.pi * i / n
                p = np.asarray(self.center) + self.radius * np.array([math.cos(th), 0.0, math.sin(th)])
                out.append(look_at(p, self.target))
            elif self.kind == "loop":
                th = 2 * math.pi * i / n
                fwd = np.array([math.sin(th), 0.0, math.cos(th)])
                p = np.asarray(self.center) + self.radius * fwd
                out.append(look_at(p, p + fwd))
            else:
                raise ValueError(f"unknown trajectory kind {self.kind!r}")
        return out

    def timestamps(self) -> list[float]:
        return [round(i / self.fps, 6) for i in range(self.n_frames)]


def look_at(position: np.ndarray, target: np.ndarray, down=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``position`` with +z toward ``target`` and +y roughly ``down``."""
    z = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), position)


@dataclass(frozen=True)
class SceneSpec:
    name: str
    rects: tuple[Rect, ...] = ()
    boxes: tuple[Box, ...] = ()
    trajectory: TrajectorySpec = TrajectorySpec("static", 1)
    intrinsics: PinholeIntrinsics = SYNTHETIC_INTRINSICS
    noise: NoiseModel = NoiseModel()
    max_depth: float = 7.0
    min_depth: float = 0.3
    seed: int = 0
    depth_scale: float = DEPTH_SCALE

    def all_rects(self) -> list[Rect]:
        rects = list(self.rects)
        for b in self.boxes:
            rects.extend(b.faces())
        return rects

    def with_noise(self, noise: NoiseModel) -> SceneSpec:
        return replace(self, noise=noise)

    def with_frames(self, n: int) -> SceneSpec:
        return replace(self, trajectory=replace(self.trajectory, n_frames=n))


def raycast(rects: Sequence[Rect], pose: Pose, intr: PinholeIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Exact z-depth (``inf`` on a miss) and texture intensity per pixel."""
    u, v = np.meshgrid(np.arange(intr.width, dtype=float), np.arange(intr.height, dtype=float))
    # unit-z camera rays: the hit parameter equals the z-depth
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    d_w = d_cam @ pose.R.T
    o = pose.t
    depth = np.full(u.shape, np.inf)
    inten = np.zeros(u.shape)
    for rect in rects:
        a = rect.axis
        others = [k for k in range(3) if k != a]
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (rect.offset - o[a]) / d_w[..., a]
        s = o[others[0]] + lam * d_w[..., others[0]]
        t = o[others[1]] + lam * d_w[..., others[1]]
        hit = (
            (lam > 1e-9) & (lam < depth)
            & (s >= rect.lo[0]) & (s <= rect.hi[0]) & (t >= rect.lo[1]) & (t <= rect.hi[1])
        )
        if not hit.any():
            continue
        depth[hit] = lam[hit]
        inten[hit] = rect.texture(s[hit], t[hit])
    return depth, inten


@dataclass
class RenderedSequence:
    spec: SceneSpec
    timestamps: list[float]
    poses: list[Pose]
    gray: list[np.ndarray]  # float intensities after noise
    depth: list[np.ndarray]  # sensor depth in meters, 0 = invalid
    gt_depth: list[np.ndarray]  # exact ray depth, inf = miss
    quantized: bool = True
    rgb: list[np.ndarray] = field(default_factory=list)
    raw_depth: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.timestamps)

    def frame(self, i: int, min_depth: float = 0.3, max_depth: float = 7.0, n_levels: int = N_LEVELS) -> Frame:
        intr = self.spec.intrinsics
        if self.quantized:
            return frame_from_raw(self.rgb[i], self.raw_depth[i], intr, self.timestamps[i], i,
                                  self.spec.depth_scale, min_depth, max_depth, n_levels)
        return Frame.from_images(self.gray[i], self.depth[i], intr, self.timestamps[i], i,
                                 min_depth, max_depth, n_levels)

    def frames(self, min_depth: float = 0.3, max_depth: float = 7.0, n_levels: int = N_LEVELS) -> list[Frame]:
        return [self.frame(i, min_depth, max_depth, n_levels) for i in range(len(self))]

    def write(self, root: str | Path) -> Path:
        if not self.quantized:
            raise ValueError("only quantized sequences can be written in TUM format")
        return write_sequence(root, self.timestamps, self.rgb, self.raw_depth, self.spec.intrinsics, self.poses)


def render_views(spec: SceneSpec, poses: Sequence[Pose], quantize: bool = True, frame_ids: Sequence[int] | None = None) -> RenderedSequence:
    """Render arbitrary camera poses of ``spec``; noise is seeded per frame id."""
    intr = spec.intrinsics
    rects = spec.all_rects()
    ids = list(frame_ids) if frame_ids is not None else list(range(len(poses)))
    fps = spec.trajectory.fps
    seq = RenderedSequence(spec, [round(i / fps, 6) for i in ids], list(poses), [], [], [], quantize)
    for fid, pose in zip(ids, poses):
        for b in spec.boxes:
            if b.contains(pose.t):
                raise DegenerateSceneError(f"camera at {pose.t.tolist()} is inside a box")
        z, inten = raycast(rects, pose, intr)
        hit = np.isfinite(z)
        if hit.mean() < MIN_COVERAGE:
            raise DegenerateSceneError(f"frame {fid} sees only {hit.mean():.0%} of the scene")
        rng = np.random.default_rng([spec.seed, fid])
        gray = inten.copy()
        if spec.noise.intensity_sigma > 0:
            gray += rng.normal(0.0, spec.noise.intensity_sigma, gray.shape)
        fb = intr.fx * intr.baseline
        sensor = np.where(hit, z, 0.0)
        if spec.noise.disparity_sigma > 0:
            disp = np.where(hit, fb / np.where(hit, z, 1.0), 0.0)
            disp = disp + rng.normal(0.0, spec.noise.disparity_sigma, disp.shape)
            ok = hit & (disp > 0)
            sensor = np.where(ok, fb / np.where(ok, disp, 1.0), 0.0)
        if spec.noise.dropout > 0:
            sensor[rng.random(sensor.shape) < spec.noise.dropout] = 0.0
        sensor[sensor > spec.max_depth] = 0.0
        seq.gt_depth.append(z)
        if quantize:
            g8 = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
            raw = encode_depth(sensor, spec.depth_scale)
            seq.rgb.append(np.repeat(g8[..., None], 3, axis=2))
            seq.raw_depth.append(raw)
            seq.gray.append(g8.astype(np.float64))
            seq.depth.append(raw / spec.depth_scale)
        else:
            seq.gray.append(gray)
            seq.depth.append(sensor)
    return seq


def render_sequence(spec: SceneSpec, quantize: bool = True, max_frames: int = 0) -> RenderedSequence:
    """Render the frames of ``spec.trajectory`` (only the first ``max_frames`` when positive).

    With ``quantize`` the frames are 8-bit RGB and 16-bit depth exactly as they
    would be written to disk, so in-memory and on-disk runs see identical data.
    """
    poses = spec.trajectory.poses()
    return render_views(spec, poses[:max_frames] if max_frames > 0 else poses, quantize)


def _room(x: float, y_floor: float, y_ceil: float, z_near: float, z_far: float, texture: Texture, seed: int) -> tuple[Rect, ...]:
    def tex(k):
        return replace(texture, seed=seed + k) if texture.kind != "constant" else texture
    return (
        Rect(0, -x, (y_ceil, z_near), (y_floor, z_far), tex(1)),
        Rect(0, x, (y_ceil, z_near), (y_floor, z_far), tex(2)),
        Rect(1, y_floor, (-x, z_near), (x, z_far), tex(3)),
        Rect(1, y_ceil, (-x, z_near), (x, z_far), tex(4)),
        Rect(2, z_far, (-x, y_ceil), (x, y_floor), tex(5)),
        Rect(2, z_near, (-x, y_ceil), (x, y_floor), tex(6)),
    )


MILD_NOISE = NoiseModel(intensity_sigma=2.0, disparity_sigma=0.5)


def make_standard_scenes(noise: NoiseModel = MILD_NOISE) -> list[SceneSpec]:
    """The four oracle scenes:

    a. ``textured_structured`` - textured room with boxes, circle look-at path.
    b. ``textured_planar`` - one textured wall, sideways dolly (no structure).
    c. ``textureless_structured`` - boxes in a room, every surface one flat gray (no texture).
    d. ``far_content`` - near boxes in front of a wall at 15 m, beyond sensor range.
    """
    tex = Texture("noise")
    a = SceneSpec(
        "textured_structured",
        rects=_room(2.5, 1.0, -1.5, -3.0, 4.5, tex, 10),
        boxes=(
            Box((-0.7, 0.6, 2.5), (0.6, 0.8, 0.6), replace(tex, seed=21)),
            Box((0.8, 0.4, 3.2), (0.5, 1.2, 0.5), replace(tex, seed=22)),
            Box((0.1, 0.8, 2.0), (0.4, 0.4, 0.4), replace(tex, seed=23)),
        ),
        trajectory=TrajectorySpec("circle", 200, center=(0.0, 0.0, 0.0), radius=0.3, target=(0.0, 0.2, 3.0)),
        noise=noise,
        seed=1,
    )
    b = SceneSpec(
        "textured_planar",
        rects=(Rect(2, 2.5, (-20.0, -20.0), (20.0, 20.0), replace(tex, seed=31)),),
        trajectory=TrajectorySpec("translation", 60, start=(-0.25, 0.0, 0.0), end=(0.25, 0.05, 0.0)),
        noise=noise,
        seed=2,
    )
    flat = Texture("constant", mean=128.0)
    c = SceneSpec(
        "textureless_structured",
        rects=_room(2.0, 1.0, -1.2, -1.0, 4.0, flat, 40),
        boxes=(
            Box((-0.7, 0.6, 2.4), (0.6, 0.8, 0.6), flat),
            Box((0.8, 0.3, 3.0), (0.5, 1.4, 0.5), flat),
            Box((0.1, -0.6, 2.0), (0.4, 0.4, 0.4), flat),
        ),
        trajectory=TrajectorySpec("circle", 60, center=(0.0, 0.0, 0.0), radius=0.2, target=(0.0, 0.2, 3.0)),
        noise=noise,
        seed=3,
    )
    far_tex = Texture("noise", seed=51, min_wavelength=1.5, max_wavelength=4.0)
    d = SceneSpec(
        "far_content",
        rects=(
            Rect(2, 15.0, (-30.0, -30.0), (30.0, 30.0), far_tex),
            Rect(1, 1.0, (-3.0, -1.0), (3.0, 3.5), replace(tex, seed=52)),
        ),
        boxes=(
            Box((-0.6, 0.55, 2.4), (0.6, 0.9, 0.6), replace(tex, seed=53)),
            Box((0.7, 0.5, 2.9), (0.6, 1.0, 0.6), replace(tex, seed=54)),
        ),
        trajectory=TrajectorySpec("translation", 40, start=(-0.15, 0.0, 0.0), end=(0.15, 0.0, 0.0)),
        noise=noise,
        seed=4,
    )
    return [a, b, c, d]


def make_loop_scene(noise: NoiseModel = MILD_NOISE, n_frames: int = 240) -> SceneSpec:
    """Textured room circled by an outward-facing camera that returns to its start view.

    Walls carry multi-scale texture around distinct mean brightness so that
    coarse thumbnails stay recognizable under a few degrees of rotation.
    """
    tex = Texture("noise", min_wavelength=0.15, max_wavelength=2.5, n_components=16)
    walls = tuple(
        replace(r, texture=replace(r.texture, mean=m))
        for r, m in zip(_room(3.0, 1.2, -1.5, -3.0, 3.0, tex, 60), (95.0, 160.0, 120.0, 135.0, 110.0, 150.0))
    )
    return SceneSpec(
        "loop_room",
        rects=walls,
        boxes=(
            Box((1.6, 0.7, 1.6), (0.6, 1.0, 0.6), replace(tex, seed=71, mean=70.0)),
            Box((-1.5, 0.5, -1.4), (0.8, 1.4, 0.5), replace(tex, seed=72, mean=185.0)),
            Box((-1.7, 0.8, 1.2), (0.5, 0.8, 0.9), replace(tex, seed=73, mean=100.0)),
        ),
        trajectory=TrajectorySpec("loop", n_frames, center=(0.0, 0.0, 0.0), radius=0.5),
        noise=noise,
        seed=5,
    )


def scene_by_name(name: str, noise: NoiseModel | None = None) -> SceneSpec:
    scenes = {s.name: s for s in make_standard_scenes()}
    scenes["loop_room"] = make_loop_scene()
    aliases = {"a": "textured_structured", "b": "textured_planar", "c": "textureless_structured",
               "d": "far_content", "loop": "loop_room"}
    key = aliases.get(name, name)
    if key not in scenes:
        raise KeyError(f"unknown synthetic scene {name!r}; choose from {sorted(scenes) + sorted(aliases)}")
    spec = scenes[key]
    return spec.with_noise(noise) if noise is not None else spec
