"""Procedural labeled scenes of rotated ellipses and rectangles.

Shapes are placed by rejection sampling, rendered with supersampled
anti-aliasing over a flat, gradient or noisy background, and optionally
paired with a depth raster (table plane with raised object tops).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .netpbm import read_pgm, read_ppm, write_pgm16, write_ppm
from .overlap import iou_matrix, pack_polygons, to_polygon
from .primitives import Category, RotatedPrimitive, normalize_angle, read_labels, write_labels

MAX_ATTEMPTS = 1000
BACKGROUNDS = ("flat", "gradient", "noise")
SUPERSAMPLE = 4


class SceneDensityError(ValueError):
    """Placement failed: the requested objects do not fit under the overlap limits."""


@dataclass(frozen=True)
class SceneSpec:
    width: int = 416
    height: int = 416
    object_count: tuple[int, int] = (1, 6)
    categories: tuple[Category, ...] = tuple(Category)
    size_range: tuple[float, float] = (24.0, 96.0)
    max_pairwise_iou: float = 0.3
    # share of either shape's area that another may cover; keeps labels visible
    max_occlusion: float = 0.04
    background: str = "gradient"
    noise_sigma: float = 4.0
    seed: int = 0
    with_depth: bool = True
    table_depth_mm: int = 600
    object_height_mm: tuple[int, int] = (20, 80)

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(Category(c) for c in self.categories))
        if self.width < 32 or self.height < 32:
            raise ValueError(f"scene must be at least 32x32, got {self.width}x{self.height}")
        lo, hi = self.object_count
        if not 0 <= lo <= hi:
            raise ValueError(f"bad object_count range {self.object_count}")
        smin, smax = self.size_range
        if not 2 < smin <= smax:
            raise ValueError(f"size range must satisfy 2 < min <= max, got {self.size_range}")
        if smax >= min(self.width, self.height):
            raise ValueError(f"max size {smax} does not fit a {self.width}x{self.height} scene")
        if not 0 <= self.max_pairwise_iou < 1:
            raise ValueError(f"max_pairwise_iou must be in [0, 1), got {self.max_pairwise_iou}")
        if not 0 <= self.max_occlusion <= 1:
            raise ValueError(f"max_occlusion must be in [0, 1], got {self.max_occlusion}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}, got {self.background!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.categories:
            raise ValueError("need at least one category")
        hmin, hmax = self.object_height_mm
        if not 0 < hmin <= hmax < self.table_depth_mm:
            raise ValueError(f"object heights {self.object_height_mm} must be positive and below the table depth")


@dataclass
class LabeledScene:
    image: np.ndarray  # (H, W, 3) uint8
    labels: list[RotatedPrimitive]
    depth: np.ndarray | None  # (H, W) uint16 millimeters, 0 = invalid
    seed: int
    index: int = 0
    colors: list[tuple[int, int, int]] = field(default_factory=list)
    heights_mm: list[int] = field(default_factory=list)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def half_extents(w: float, h: float, theta: float, elliptic: bool) -> tuple[float, float]:
    c, s = abs(math.cos(theta)), abs(math.sin(theta))
    if elliptic:
        a, b = w / 2, h / 2
        return math.hypot(a * c, b * s), math.hypot(a * s, b * c)
    return (w * c + h * s) / 2, (w * s + h * c) / 2


def _sample_shape(spec: SceneSpec, rng: np.random.Generator) -> RotatedPrimitive:
    cat = spec.categories[int(rng.integers(len(spec.categories)))]
    smin, smax = spec.size_range
    if cat.symmetric:
        w = h = float(rng.uniform(smin, smax))
    else:
        while True:
            a, b = sorted(rng.uniform(smin, smax, 2), reverse=True)
            if a >= 1.25 * b:
                break
            if smax < 1.25 * smin:
                # range too narrow for a visible aspect ratio; take what it allows
                break
        w, h = float(a), float(b)
    if cat == Category.CIRCLE:
        theta = 0.0
    elif cat == Category.SQUARE:
        theta = normalize_angle(float(rng.uniform(-math.pi / 4, math.pi / 4)))
    else:
        theta = normalize_angle(float(rng.uniform(-math.pi / 2, math.pi / 2)))
    ex, ey = half_extents(w, h, theta, cat.elliptic)
    cx = float(rng.uniform(ex, spec.width - ex))
    cy = float(rng.uniform(ey, spec.height - ey))
    return RotatedPrimitive(cat, cx, cy, w, h, theta)


def _fits(candidate: RotatedPrimitive, placed: Sequence[RotatedPrimitive], spec: SceneSpec) -> bool:
    if not placed:
        return True
    params = np.array([p.as_tuple() for p in placed])
    cats = np.array([p.category for p in placed])
    ious = iou_matrix(np.array([candidate.as_tuple()]), [candidate.category], params, cats)[0]
    if np.any(ious > spec.max_pairwise_iou):
        return False
    areas = pack_polygons(np.vstack([params, candidate.as_tuple()]), np.append(cats, candidate.category)).areas
    own = areas[-1]
    inter = ious * (areas[:-1] + own) / (1.0 + ious)
    return bool(np.all(inter <= spec.max_occlusion * np.minimum(areas[:-1], own)))


def place_shapes(spec: SceneSpec, rng: np.random.Generator) -> list[RotatedPrimitive]:
    lo, hi = spec.object_count
    count = int(rng.integers(lo, hi + 1))
    placed: list[RotatedPrimitive] = []
    for k in range(count):
        for _ in range(MAX_ATTEMPTS):
            cand = _sample_shape(spec, rng)
            if _fits(cand, placed, spec):
                placed.append(cand)
                break
        else:
            raise SceneDensityError(f"could not place object {k + 1} of {count} after {MAX_ATTEMPTS} attempts")
    return placed


def coverage(prim: RotatedPrimitive, width: int, height: int) -> tuple[slice, slice, np.ndarray]:
    """Fractional pixel coverage of the exact shape over its bounding window.

    Pixel (row i, col j) spans [j, j+1) x [i, i+1).
    """
    ex, ey = half_extents(prim.w, prim.h, prim.theta, prim.category.elliptic)
    j0, j1 = max(int(math.floor(prim.cx - ex)), 0), min(int(math.ceil(prim.cx + ex)), width)
    i0, i1 = max(int(math.floor(prim.cy - ey)), 0), min(int(math.ceil(prim.cy + ey)), height)
    sub = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    xs = (np.arange(j0, j1)[:, None] + sub[None, :]).reshape(-1)
    ys = (np.arange(i0, i1)[:, None] + sub[None, :]).reshape(-1)
    X, Y = np.meshgrid(xs - prim.cx, ys - prim.cy)
    c, s = math.cos(prim.theta), math.sin(prim.theta)
    u = X * c + Y * s
    v = -X * s + Y * c
    if prim.category.elliptic:
        inside = (u / (prim.w / 2)) ** 2 + (v / (prim.h / 2)) ** 2 <= 1.0
    else:
        inside = (np.abs(u) <= prim.w / 2) & (np.abs(v) <= prim.h / 2)
    cov = inside.reshape(i1 - i0, SUPERSAMPLE, j1 - j0, SUPERSAMPLE).mean(axis=(1, 3))
    return slice(i0, i1), slice(j0, j1), cov


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(30, 80, 3)
    img = np.broadcast_to(base, (spec.height, spec.width, 3)).astype(np.float64)
    if spec.background == "gradient":
        ang = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
        ramp = (xx * math.cos(ang) + yy * math.sin(ang)) / max(spec.width, spec.height)
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
        img = img + 40.0 * ramp[..., None]
    elif spec.background == "noise":
        img = img + rng.uniform(0, 40, (spec.height, spec.width, 1))
    return img


def _shape_color(rng: np.random.Generator) -> tuple[int, int, int]:
    # background stays below 125 per channel; one bright channel keeps shapes separable
    col = rng.integers(0, 256, 3)
    col[int(rng.integers(3))] = int(rng.integers(170, 256))
    return tuple(int(v) for v in col)


def render(spec: SceneSpec, labels: Sequence[RotatedPrimitive], rng: np.random.Generator):
    img = _background(spec, rng)
    depth = np.full((spec.height, spec.width), spec.table_depth_mm, dtype=np.int64) if spec.with_depth else None
    colors, heights = [], []
    for prim in labels:
        color = _shape_color(rng)
        height = int(rng.integers(spec.object_height_mm[0], spec.object_height_mm[1] + 1))
        rows, cols, cov = coverage(prim, spec.width, spec.height)
        img[rows, cols] = img[rows, cols] * (1.0 - cov[..., None]) + np.array(color) * cov[..., None]
        if depth is not None:
            depth[rows, cols] = np.where(cov >= 0.5, spec.table_depth_mm - height, depth[rows, cols])
        colors.append(color)
        heights.append(height)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image, (depth.astype(np.uint16) if depth is not None else None), colors, heights


def generate_scene(spec: SceneSpec, seed: int | None = None, index: int = 0) -> LabeledScene:
    """Deterministic in (spec, seed, index); `seed` defaults to `spec.seed`."""
    seed = spec.seed if seed is None else seed
    rng = scene_rng(seed, index)
    labels = place_shapes(spec, rng)
    image, depth, colors, heights = render(spec, labels, rng)
    return LabeledScene(image, labels, depth, seed, index, colors, heights)


IMAGE_NAME = "image.ppm"
LABELS_NAME = "labels.txt"
DEPTH_NAME = "depth.pgm"
MANIFEST_NAME = "manifest.txt"


def write_scene(scene: LabeledScene, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / IMAGE_NAME, scene.image)
    write_labels(d / LABELS_NAME, scene.labels)
    if scene.depth is not None:
        write_pgm16(d / DEPTH_NAME, scene.depth)
    return d


def read_scene(directory: str | Path) -> LabeledScene:
    d = Path(directory)
    depth = read_pgm(d / DEPTH_NAME) if (d / DEPTH_NAME).exists() else None
    return LabeledScene(read_ppm(d / IMAGE_NAME), read_labels(d / LABELS_NAME), depth, seed=-1)


def write_dataset(spec: SceneSpec, count: int, out_dir: str | Path, seed: int | None = None) -> Path:
    """Write `count` scenes as scene_NNNN/ directories plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(count):
        name = f"scene_{i:04d}"
        write_scene(generate_scene(spec, seed, i), out / name)
        names.append(name)
    manifest = out / MANIFEST_NAME
    manifest.write_text("".join(n + "\n" for n in sorted(names)))
    return manifest


def read_manifest(path: str | Path) -> list[Path]:
    """Scene directories listed in a manifest, resolved against its folder."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        p = Path(s)
        p = p if p.is_absolute() else path.parent / p
        if not p.is_dir():
            raise ValueError(f"{path}:{lineno}: scene directory {s} not found")
        entries.append(p)
    return entries


def draw_outlines(image: np.ndarray, prims: Sequence[RotatedPrimitive], color=(255, 0, 0)) -> np.ndarray:
    """Copy of `image` with each primitive's outline painted one pixel wide."""
    out = np.array(image, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    for prim in prims:
        poly = to_polygon(prim, 64)
        nxt = np.roll(poly, -1, axis=0)
        for a, b in zip(poly, nxt):
            steps = max(int(np.ceil(np.hypot(*(b - a)) * 2)), 1)
            t = np.linspace(0.0, 1.0, steps + 1)[:, None]
            pts = np.floor(a + t * (b - a)).astype(int)
            ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
            out[pts[ok, 1], pts[ok, 0]] = color
    return out
