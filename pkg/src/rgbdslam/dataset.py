"""TUM RGB-D sequence reading/writing, trajectory files and PLY export.

Sequence layout::

    rgb.txt, depth.txt        "timestamp relative/path" per line, '#' comments
    rgb/*.png                 8-bit color
    depth/*.png               16-bit, ``depth_m = raw / depth_scale``, 0 = no reading
    groundtruth.txt           optional, trajectory format below
    intrinsics.yaml           optional, written by the synthetic renderer

Trajectory lines are ``timestamp tx ty tz qx qy qz qw`` (camera-to-world).
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from .image import N_LEVELS, Frame, rgb_to_gray
from .se3 import PinholeIntrinsics, Pose

FREIBURG_DEFAULT = PinholeIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)
DEPTH_SCALE = 5000.0


class DatasetError(IOError):
    pass


class TrajectoryParseError(ValueError):
    def __init__(self, path, lineno: int, line: str, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}: {line!r}")
        self.lineno = lineno


def read_file_list(path: str | Path) -> list[tuple[float, list[str]]]:
    """Parse a TUM list file into ``(timestamp, fields)`` pairs."""
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            try:
                out.append((float(parts[0]), parts[1:]))
            except ValueError as exc:
                raise TrajectoryParseError(path, lineno, line, "bad timestamp") from exc
    return out


def associate(first: Sequence[float], second: Sequence[float], max_dt: float = 0.02) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp pairing, each entry used at most once.

    Candidate pairs within ``max_dt`` are accepted in order of increasing
    time difference. Returns index pairs ``(i, j)`` sorted by ``i``.
    """
    order = sorted(range(len(second)), key=lambda j: second[j])
    ts = [second[j] for j in order]
    candidates = []
    for i, a in enumerate(first):
        lo = bisect.bisect_left(ts, a - max_dt)
        hi = bisect.bisect_right(ts, a + max_dt)
        for k in range(lo, hi):
            d = abs(a - ts[k])
            if d <= max_dt:
                candidates.append((d, i, order[k]))
    candidates.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


@dataclass(frozen=True)
class ManifestEntry:
    timestamp: float
    rgb_path: Path
    depth_path: Path


@dataclass(frozen=True)
class SequenceManifest:
    entries: tuple[ManifestEntry, ...]
    intrinsics: PinholeIntrinsics
    depth_scale: float = DEPTH_SCALE
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def groundtruth_path(self) -> Path | None:
        if self.root is None:
            return None
        p = self.root / "groundtruth.txt"
        return p if p.exists() else None


def build_manifest(
    rgb_index: Sequence[tuple[float, str]],
    depth_index: Sequence[tuple[float, str]],
    intrinsics: PinholeIntrinsics = FREIBURG_DEFAULT,
    depth_scale: float = DEPTH_SCALE,
    max_dt: float = 0.02,
    root: Path | None = None,
) -> SequenceManifest:
    pairs = associate([t for t, _ in rgb_index], [t for t, _ in depth_index], max_dt)
    if not pairs:
        raise DatasetError("no rgb/depth pairs within the association tolerance")
    base = Path(root) if root is not None else Path()
    entries = []
    for i, j in pairs:
        ts, rgb = rgb_index[i]
        _, depth = depth_index[j]
        entries.append(ManifestEntry(ts, base / rgb, base / depth))
    stamps = [e.timestamp for e in entries]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise DatasetError("associated timestamps are not strictly increasing")
    return SequenceManifest(tuple(entries), intrinsics, depth_scale, root)


def read_intrinsics(path: str | Path) -> PinholeIntrinsics:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return PinholeIntrinsics(**data)


def write_intrinsics(path: str | Path, intr: PinholeIntrinsics) -> None:
    fields = ("fx", "fy", "cx", "cy", "width", "height", "baseline", "disparity_sigma")
    with open(path, "w") as fh:
        yaml.safe_dump({k: getattr(intr, k) for k in fields}, fh, sort_keys=False)


def load_sequence(
    root: str | Path,
    intrinsics: PinholeIntrinsics | None = None,
    depth_scale: float = DEPTH_SCALE,
    max_dt: float = 0.02,
) -> SequenceManifest:
    """Associate a TUM sequence directory.

    Intrinsics precedence: explicit argument, then ``intrinsics.yaml`` in the
    directory, then the Freiburg factory defaults.
    """
    root = Path(root)
    try:
        rgb = [(t, f[0]) for t, f in read_file_list(root / "rgb.txt")]
        depth = [(t, f[0]) for t, f in read_file_list(root / "depth.txt")]
    except FileNotFoundError as exc:
        raise DatasetError(f"{root} is not a TUM sequence: {exc}") from exc
    if intrinsics is None:
        calib = root / "intrinsics.yaml"
        intrinsics = read_intrinsics(calib) if calib.exists() else FREIBURG_DEFAULT
    manifest = build_manifest(rgb, depth, intrinsics, depth_scale, max_dt, root)
    for e in manifest.entries:
        if not e.rgb_path.exists() or not e.depth_path.exists():
            raise DatasetError(f"missing image for t={e.timestamp}")
    return manifest


def decode_depth(raw: np.ndarray, depth_scale: float = DEPTH_SCALE) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / depth_scale


def encode_depth(depth_m: np.ndarray, depth_scale: float = DEPTH_SCALE) -> np.ndarray:
    raw = np.rint(np.asarray(depth_m, dtype=np.float64) * depth_scale)
    return np.clip(np.nan_to_num(raw, nan=0.0), 0, 65535).astype(np.uint16)


def read_rgb(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DatasetError(f"cannot read {path}")
    if img.dtype != np.uint8:
        raise DatasetError(f"{path}: expected 8-bit color, got {img.dtype}")
    if img.ndim == 2:
        return np.repeat(img[..., None], 3, axis=2)
    return cv2.cvtColor(img[..., :3], cv2.COLOR_BGR2RGB)


def read_depth_raw(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DatasetError(f"cannot read {path}")
    if img.dtype != np.uint16 or img.ndim != 2:
        raise DatasetError(f"{path}: expected 16-bit single-channel depth, got {img.dtype} {img.shape}")
    return img


def load_frame(
    entry: ManifestEntry,
    manifest: SequenceManifest,
    index: int = 0,
    min_depth: float = 0.3,
    max_depth: float = 7.0,
    n_levels: int = N_LEVELS,
) -> Frame:
    rgb = read_rgb(entry.rgb_path)
    raw = read_depth_raw(entry.depth_path)
    return frame_from_raw(rgb, raw, manifest.intrinsics, entry.timestamp, index,
                          manifest.depth_scale, min_depth, max_depth, n_levels)


def frame_from_raw(
    rgb: np.ndarray,
    raw_depth: np.ndarray,
    intr: PinholeIntrinsics,
    timestamp: float,
    index: int = 0,
    depth_scale: float = DEPTH_SCALE,
    min_depth: float = 0.3,
    max_depth: float = 7.0,
    n_levels: int = N_LEVELS,
) -> Frame:
    """Decode an 8-bit RGB + 16-bit depth pair; shared by disk and in-memory paths."""
    return Frame.from_images(
        rgb_to_gray(rgb), decode_depth(raw_depth, depth_scale), intr, timestamp, index,
        min_depth, max_depth, n_levels,
    )


def write_sequence(
    root: str | Path,
    timestamps: Sequence[float],
    rgbs: Iterable[np.ndarray],
    raw_depths: Iterable[np.ndarray],
    intrinsics: PinholeIntrinsics,
    groundtruth: Sequence[Pose] | None = None,
) -> Path:
    """Write a sequence in TUM layout (PNG images, index files, ground truth)."""
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines = ["# color images", "# timestamp filename"]
    depth_lines = ["# depth maps", "# timestamp filename"]
    for ts, rgb, raw in zip(timestamps, rgbs, raw_depths):
        name = f"{ts:.6f}.png"
        if not cv2.imwrite(str(root / "rgb" / name), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
            raise DatasetError(f"cannot write {root / 'rgb' / name}")
        if not cv2.imwrite(str(root / "depth" / name), raw):
            raise DatasetError(f"cannot write {root / 'depth' / name}")
        rgb_lines.append(f"{ts:.6f} rgb/{name}")
        depth_lines.append(f"{ts:.6f} depth/{name}")
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    write_intrinsics(root / "intrinsics.yaml", intrinsics)
    if groundtruth is not None:
        write_trajectory(root / "groundtruth.txt", poses_to_records(timestamps, groundtruth))
    return root


@dataclass(frozen=True)
class TrajectoryRecord:
    timestamp: float
    translation: tuple[float, float, float]
    quaternion: tuple[float, float, float, float]  # qx, qy, qz, qw

    def __post_init__(self) -> None:
        if abs(np.linalg.norm(self.quaternion) - 1.0) > 1e-6:
            raise ValueError(f"quaternion not unit: {self.quaternion}")

    def pose(self) -> Pose:
        return Pose(Rotation.from_quat(self.quaternion).as_matrix(), self.translation)


def record_from_pose(timestamp: float, pose: Pose) -> TrajectoryRecord:
    q = Rotation.from_matrix(pose.R).as_quat()
    if q[3] < 0:
        q = -q
    q = q / np.linalg.norm(q)
    return TrajectoryRecord(float(timestamp), tuple(float(x) for x in pose.t), tuple(float(x) for x in q))


def poses_to_records(timestamps: Sequence[float], poses: Sequence[Pose]) -> list[TrajectoryRecord]:
    return [record_from_pose(t, p) for t, p in zip(timestamps, poses)]


def _fmt(x: float) -> str:
    s = f"{x:.9g}"
    return "0" if s == "-0" else s


def format_record(r: TrajectoryRecord) -> str:
    return " ".join([f"{r.timestamp:.6f}", *(_fmt(x) for x in r.translation), *(_fmt(x) for x in r.quaternion)])


def write_trajectory(path: str | Path, records: Iterable[TrajectoryRecord]) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for r in records:
            fh.write(format_record(r) + "\n")


def read_trajectory(path: str | Path) -> list[TrajectoryRecord]:
    records = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise TrajectoryParseError(path, lineno, line, f"expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise TrajectoryParseError(path, lineno, line, "non-numeric field") from exc
            q = np.array(vals[4:8])
            n = np.linalg.norm(q)
            if not n > 0:
                raise TrajectoryParseError(path, lineno, line, "zero quaternion")
            records.append(TrajectoryRecord(vals[0], tuple(vals[1:4]), tuple(q / n)))
    return records


def write_ply(path: str | Path, points: np.ndarray, colors: np.ndarray) -> None:
    """ASCII PLY with ``x y z red green blue`` vertices."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.clip(np.rint(np.asarray(colors)), 0, 255).astype(np.uint8).reshape(-1, 3)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    try:
        with open(path, "w") as fh:
            fh.write(header)
            for p, c in zip(points, colors):
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    end = lines.index("end_header")
    n = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    data = np.array([l.split() for l in lines[end + 1:end + 1 + n]], dtype=np.float64).reshape(n, 6)
    return data[:, :3], data[:, 3:].astype(np.uint8)


def export_ply(path: str | Path, keyframes: Sequence) -> int:
    """Write every keyframe's semi-dense points, unfused, in world coordinates.

    Points are taken from the finest photometric level and moved by each
    keyframe's pose. Returns the vertex count.
    """
    if not keyframes:
        raise ValueError("at least one keyframe is required")
    pts, cols = [], []
    for kf in keyframes:
        ps = kf.photometric[-1]
        pts.append(kf.pose.apply(ps.points))
        cols.append(np.repeat(ps.intensity[:, None], 3, axis=1))
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    write_ply(path, points, np.concatenate(cols))
    return len(points)
