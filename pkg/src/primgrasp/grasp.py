"""Robot-frame grasp poses from 2D detections and registered depth."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .primitives import Category, RotatedPrimitive, normalize_angle
from .suppression import ScoredDetection

DEFAULT_MATCH_RADIUS = 20.0
DEFAULT_MIN_PRESENCE = 0.5
DEFAULT_FRAME_COUNT = 10
APERTURE_SAFETY = 1.2


class InvalidDepthError(ValueError):
    pass


class GraspRejected(ValueError):
    """A grasp failed a workspace or gripper check; the rejected pose is kept on `.pose`."""

    def __init__(self, message: str, pose: "GraspPose"):
        super().__init__(message)
        self.pose = pose


class UnreachableError(GraspRejected):
    pass


class ApertureError(GraspRejected):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx0: float
    cy0: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def project(self, p) -> tuple[float, float]:
        x, y, z = p
        return self.fx * x / z + self.cx0, self.fy * y / z + self.cy0


@dataclass(frozen=True)
class Extrinsics:
    """Camera-to-robot-base rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(r) <= 0:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class WorkspaceConfig:
    max_reach: float = 0.85
    min_z: float = 0.01
    max_z: float = 0.6
    max_aperture: float = 0.155

    def __post_init__(self):
        if not 0 < self.min_z < self.max_z:
            raise ValueError(f"need 0 < min_z < max_z, got {self.min_z}, {self.max_z}")
        if not self.max_reach > 0:
            raise ValueError("max_reach must be positive")
        if not self.max_aperture > 0:
            raise ValueError("max_aperture must be positive")


@dataclass(frozen=True)
class GraspPose:
    position: tuple[float, float, float]
    yaw: float
    aperture: float
    reachable: bool = True

    def format(self) -> str:
        x, y, z = self.position
        return f"{x:.6f} {y:.6f} {z:.6f} {self.yaw:.6f} {self.aperture:.6f} {int(self.reachable)}"


def pixel_to_camera(u: float, v: float, depth_m: float, k: CameraIntrinsics) -> np.ndarray:
    """Pinhole backprojection of pixel (u, v) at metric depth."""
    if not (depth_m > 0) or not math.isfinite(depth_m):
        raise InvalidDepthError(f"invalid depth {depth_m} at pixel ({u}, {v})")
    return np.array([(u - k.cx0) * depth_m / k.fx, (v - k.cy0) * depth_m / k.fy, depth_m])


def camera_to_robot(p, e: Extrinsics) -> np.ndarray:
    return e.rotation @ np.asarray(p, dtype=np.float64) + e.translation


def sample_depth(depth_mm: np.ndarray, u: float, v: float, window: int = 5) -> float:
    """Median of the non-zero depths in a window around (u, v), in meters."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    h, w = depth_mm.shape
    col, row = int(math.floor(u)), int(math.floor(v))
    if not (0 <= col < w and 0 <= row < h):
        raise ValueError(f"pixel ({u}, {v}) outside the {w}x{h} depth map")
    r = window // 2
    patch = depth_mm[max(row - r, 0) : row + r + 1, max(col - r, 0) : col + r + 1]
    valid = patch[patch > 0]
    if valid.size == 0:
        raise InvalidDepthError(f"no valid depth within the {window}x{window} window at ({u}, {v})")
    return float(np.median(valid)) / 1000.0


def circular_median_axis(thetas: Sequence[float]) -> float:
    """Median orientation of undirected axes.

    Angles are doubled onto the circle; the result is the member minimizing
    the summed arc distance (lowest angle on ties), halved back.
    """
    doubled = 2.0 * np.asarray(thetas, dtype=np.float64)
    diff = np.abs(doubled[:, None] - doubled[None, :]) % (2 * math.pi)
    arc = np.minimum(diff, 2 * math.pi - diff).sum(axis=1)
    best = np.flatnonzero(arc <= arc.min() + 1e-12)
    pick = best[np.argmin(doubled[best])]
    return normalize_angle(0.5 * doubled[pick])


def _frame_key(frame: Sequence[ScoredDetection]):
    return sorted((d.primitive.cx, d.primitive.cy, d.primitive.w, d.primitive.h, d.primitive.theta,
                   int(d.primitive.category), d.score) for d in frame)


def associate(frames: Sequence[Sequence[ScoredDetection]], match_radius: float = DEFAULT_MATCH_RADIUS):
    """Group detections across frames into tracks by nearest center.

    Frames are visited in a canonical order so the grouping does not depend
    on their sequence. Within a frame, the closest (track, detection) pairs
    inside `match_radius` are matched first, one detection per track; the
    rest start new tracks. A track's position is the median of its members.
    """
    tracks: list[list[ScoredDetection]] = []
    for frame in sorted(frames, key=_frame_key):
        dets = sorted(frame, key=lambda d: _frame_key([d]))
        refs = [np.median([[m.primitive.cx, m.primitive.cy] for m in t], axis=0) for t in tracks]
        pairs = []
        for ti, ref in enumerate(refs):
            for di, d in enumerate(dets):
                dist = math.hypot(d.primitive.cx - ref[0], d.primitive.cy - ref[1])
                if dist <= match_radius:
                    pairs.append((dist, ti, di))
        pairs.sort()
        used_t, used_d = set(), set()
        for _, ti, di in pairs:
            if ti in used_t or di in used_d:
                continue
            tracks[ti].append(dets[di])
            used_t.add(ti)
            used_d.add(di)
        tracks.extend([d] for di, d in enumerate(dets) if di not in used_d)
    return tracks


def consensus(track: Sequence[ScoredDetection]) -> ScoredDetection:
    """Per-parameter medians, doubled-angle circular median, majority category."""
    prims = [d.primitive for d in track]
    cats = [int(p.category) for p in prims]
    cat = Category(max(sorted(set(cats)), key=cats.count))
    cx = float(np.median([p.cx for p in prims]))
    cy = float(np.median([p.cy for p in prims]))
    w = float(np.median([p.w for p in prims]))
    h = float(np.median([p.h for p in prims]))
    theta = 0.0 if cat == Category.CIRCLE else circular_median_axis([p.theta for p in prims])
    if cat.symmetric and abs(w - h) / max(w, h) > 0.05:
        cat = Category.ELLIPSE if cat.elliptic else Category.RECTANGLE
    score = float(np.median([d.score for d in track]))
    return ScoredDetection(RotatedPrimitive(cat, cx, cy, w, h, theta), score, min(d.source_index for d in track))


def aggregate_detections(
    frames: Sequence[Sequence[ScoredDetection]],
    match_radius: float = DEFAULT_MATCH_RADIUS,
    min_presence: float = DEFAULT_MIN_PRESENCE,
) -> list[ScoredDetection]:
    """Consensus detections over several frames of the same scene.

    Objects seen in fewer than `min_presence` of the frames are dropped.
    Output is ordered by consensus center (y, then x).
    """
    if not frames:
        return []
    tracks = associate(frames, match_radius)
    needed = min_presence * len(frames)
    out = [consensus(t) for t in tracks if len(t) >= needed - 1e-12]
    return sorted(out, key=lambda d: (d.primitive.cy, d.primitive.cx))


def synthesize_grasp(
    prim: RotatedPrimitive,
    p_robot,
    ws: WorkspaceConfig = WorkspaceConfig(),
    pixel_to_m: float = 1.0,
) -> GraspPose:
    """Top-down grasp at the object's top center, closing across its minor axis.

    Raises UnreachableError (carrying the pose) outside the reach sphere or
    the z band, and ApertureError when the object is too wide to grip.
    """
    p = np.asarray(p_robot, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"non-finite grasp position {p}")
    if not pixel_to_m > 0:
        raise ValueError(f"pixel_to_m must be positive, got {pixel_to_m}")
    yaw = 0.0 if prim.category == Category.CIRCLE else prim.theta
    aperture = prim.h * pixel_to_m * APERTURE_SAFETY
    reach = float(np.linalg.norm(p))
    ok = reach <= ws.max_reach and ws.min_z <= p[2] <= ws.max_z
    pose = GraspPose((float(p[0]), float(p[1]), float(p[2])), yaw, aperture, ok)
    if not ok:
        raise UnreachableError(
            f"position {pose.position} unreachable (|p|={reach:.4f} m, z band [{ws.min_z}, {ws.max_z}])", pose
        )
    if aperture > ws.max_aperture:
        raise ApertureError(
            f"aperture {aperture:.4f} m exceeds gripper maximum {ws.max_aperture} m",
            GraspPose(pose.position, yaw, aperture, False),
        )
    return pose


def grasp_from_detection(
    det: RotatedPrimitive,
    depth_mm: np.ndarray,
    k: CameraIntrinsics,
    e: Extrinsics,
    ws: WorkspaceConfig = WorkspaceConfig(),
    window: int = 5,
) -> GraspPose:
    """Depth lookup, backprojection and workspace gating for one detection.

    Rejected poses come back with `reachable=False` instead of raising.
    """
    z = sample_depth(depth_mm, det.cx, det.cy, window)
    p_robot = camera_to_robot(pixel_to_camera(det.cx, det.cy, z, k), e)
    try:
        return synthesize_grasp(det, p_robot, ws, pixel_to_m=z / k.fx)
    except GraspRejected as exc:
        return exc.pose


# --- calibration files

def read_intrinsics(path: str | Path) -> CameraIntrinsics:
    text = Path(path).read_text()
    found = dict(re.findall(r"\b(fx|fy|cx|cy)\s*=\s*([-+0-9.eE]+)", text))
    missing = [k for k in ("fx", "fy", "cx", "cy") if k not in found]
    if missing:
        raise ValueError(f"{path}: missing intrinsics field(s) {', '.join(missing)}")
    try:
        return CameraIntrinsics(float(found["fx"]), float(found["fy"]), float(found["cx"]), float(found["cy"]))
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def write_intrinsics(path: str | Path, k: CameraIntrinsics) -> None:
    Path(path).write_text(f"fx={k.fx!r} fy={k.fy!r} cx={k.cx0!r} cy={k.cy0!r}\n")


def read_extrinsics(path: str | Path) -> Extrinsics:
    """12 numbers, row-major 3x4 [R | t]."""
    tokens = [t for line in Path(path).read_text().splitlines() if not line.lstrip().startswith("#") for t in line.split()]
    if len(tokens) != 12:
        raise ValueError(f"{path}: expected 12 numbers, got {len(tokens)}")
    try:
        m = np.array([float(t) for t in tokens]).reshape(3, 4)
        return Extrinsics(m[:, :3], m[:, 3])
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def write_extrinsics(path: str | Path, e: Extrinsics) -> None:
    m = np.hstack([e.rotation, e.translation[:, None]])
    Path(path).write_text("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in m))


def write_grasps(path: str | Path, poses: Sequence[GraspPose]) -> None:
    Path(path).write_text("".join(p.format() + "\n" for p in poses))


def read_grasps(path: str | Path) -> list[GraspPose]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        f = line.split()
        if not f or f[0].startswith("#"):
            continue
        if len(f) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(f)}")
        x, y, z, yaw, ap = (float(v) for v in f[:5])
        out.append(GraspPose((x, y, z), yaw, ap, f[5] == "1"))
    return out
