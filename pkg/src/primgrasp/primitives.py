"""Rotated ellipse/rectangle primitives and the anchor-relative box transforms.

Angles are radians in pixel coordinates (x right, y down); the orientation is
the angle between the width/major axis and +x, kept in (-pi/2, pi/2].
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

HALF_PI = math.pi / 2
# relative |w - h| allowed for the symmetric categories
SYMMETRY_TOL = 0.05


class Category(enum.IntEnum):
    CIRCLE = 0
    ELLIPSE = 1
    SQUARE = 2
    RECTANGLE = 3

    @property
    def elliptic(self) -> bool:
        return self in (Category.CIRCLE, Category.ELLIPSE)

    @property
    def symmetric(self) -> bool:
        return self in (Category.CIRCLE, Category.SQUARE)


def normalize_angle(theta: float) -> float:
    """Wrap an undirected axis angle into (-pi/2, pi/2]."""
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    r = math.fmod(theta, math.pi)
    if r > HALF_PI:
        r -= math.pi
    elif r <= -HALF_PI:
        r += math.pi
    return r


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized `normalize_angle`."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("angles must be finite")
    r = np.fmod(theta, math.pi)
    r = np.where(r > HALF_PI, r - math.pi, r)
    return np.where(r <= -HALF_PI, r + math.pi, r)


def sigmoid(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"logit needs p in (0, 1), got {p!r}")
    return math.log(p) - math.log1p(-p)


def softmax(scores: Sequence[float]) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


@dataclass(frozen=True)
class RotatedPrimitive:
    category: Category
    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        for name in ("cx", "cy", "w", "h", "theta"):
            object.__setattr__(self, name, float(getattr(self, name)))
        vals = (self.cx, self.cy, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite primitive parameters {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"w and h must be positive, got w={self.w}, h={self.h}")
        if not -HALF_PI < self.theta <= HALF_PI:
            raise ValueError(f"theta {self.theta} outside (-pi/2, pi/2]")
        if self.category.symmetric and abs(self.w - self.h) / max(self.w, self.h) > SYMMETRY_TOL:
            raise ValueError(f"{self.category.name.lower()} needs w ~= h, got w={self.w}, h={self.h}")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h, self.theta)


@dataclass(frozen=True)
class RawPrediction:
    tx: float
    ty: float
    tw: float
    th: float
    ta: float
    tc: float
    category_scores: tuple[float, ...] = field(default=(0.0,))

    def __post_init__(self):
        object.__setattr__(self, "category_scores", tuple(float(s) for s in self.category_scores))
        vals = (self.tx, self.ty, self.tw, self.th, self.ta, self.tc, *self.category_scores)
        if not self.category_scores:
            raise ValueError("need at least one category score")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("raw prediction values must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th, self.ta, self.tc, *self.category_scores])

    @classmethod
    def from_array(cls, row: Sequence[float]) -> "RawPrediction":
        row = [float(v) for v in row]
        return cls(*row[:6], category_scores=tuple(row[6:]))


@dataclass(frozen=True)
class GridCell:
    col: int
    row: int
    stride: float

    def __post_init__(self):
        if self.col < 0 or self.row < 0:
            raise ValueError(f"grid cell indices must be non-negative, got ({self.col}, {self.row})")
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")

    @property
    def center(self) -> tuple[float, float]:
        return ((self.col + 0.5) * self.stride, (self.row + 0.5) * self.stride)


@dataclass(frozen=True)
class Anchor:
    pw: float
    ph: float
    theta_prior: float = 0.0

    def __post_init__(self):
        for name in ("pw", "ph", "theta_prior"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.pw > 0 and self.ph > 0):
            raise ValueError(f"anchor dimensions must be positive, got ({self.pw}, {self.ph})")
        if not -HALF_PI < self.theta_prior <= HALF_PI:
            raise ValueError(f"anchor theta_prior {self.theta_prior} outside (-pi/2, pi/2]")


@dataclass(frozen=True)
class HeadLayout:
    S: int
    B: int
    C: int
    stride: float

    def __post_init__(self):
        if self.S < 1 or self.B < 1 or self.C < 1:
            raise ValueError(f"S, B, C must be >= 1, got {(self.S, self.B, self.C)}")
        if self.C > len(Category):
            raise ValueError(f"at most {len(Category)} categories supported, got C={self.C}")
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")

    @property
    def image_side(self) -> float:
        return self.S * self.stride

    @property
    def channels(self) -> int:
        return 6 + self.C

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.S, self.S, self.B, self.channels)

    def cell_of(self, cx: float, cy: float) -> GridCell:
        side = self.image_side
        if not (0 <= cx < side and 0 <= cy < side):
            raise ValueError(f"center ({cx}, {cy}) outside the {side}x{side} image")
        return GridCell(int(cx // self.stride), int(cy // self.stride), self.stride)


def decode(raw: RawPrediction, cell: GridCell, anchor: Anchor) -> tuple[RotatedPrimitive, float]:
    """Map raw head outputs at one (cell, anchor) slot to a primitive and its score.

    The score is the confidence sigmoid times the best softmaxed category
    probability; the category is the argmax of the category scores.
    """
    cx = (sigmoid(raw.tx) + cell.col) * cell.stride
    cy = (sigmoid(raw.ty) + cell.row) * cell.stride
    w = anchor.pw * math.exp(raw.tw)
    h = anchor.ph * math.exp(raw.th)
    theta = normalize_angle(anchor.theta_prior + math.atan(raw.ta))
    probs = softmax(raw.category_scores)
    cat = Category(int(np.argmax(probs)))
    score = sigmoid(raw.tc) * float(probs.max())
    if cat.symmetric:
        # keep the decoded value a valid primitive when the box is far from square
        if abs(w - h) / max(w, h) > SYMMETRY_TOL:
            cat = Category.ELLIPSE if cat.elliptic else Category.RECTANGLE
    return RotatedPrimitive(cat, cx, cy, w, h, theta), score


def _cell_fraction(value: float, index: int, stride: float, axis: str) -> float:
    frac = value / stride - index
    if not 0.0 < frac < 1.0:
        raise ValueError(f"{axis} center {value} is not strictly inside cell {index} (fraction {frac})")
    return frac


def encode(
    prim: RotatedPrimitive,
    cell: GridCell,
    anchor: Anchor,
    score: float,
    num_categories: int = len(Category),
    category_margin: float = 8.0,
) -> RawPrediction:
    """Inverse of `decode`.

    The category logits are one-hot with `category_margin` on the primitive's
    category, and the confidence is chosen so the decoded score equals `score`.
    """
    if int(prim.category) >= num_categories:
        raise ValueError(f"category {prim.category.name} not representable with {num_categories} categories")
    if not 0.0 < score < 1.0:
        raise ValueError(f"score must be in (0, 1), got {score}")
    tx = logit(_cell_fraction(prim.cx, cell.col, cell.stride, "x"))
    ty = logit(_cell_fraction(prim.cy, cell.row, cell.stride, "y"))
    tw = math.log(prim.w / anchor.pw)
    th = math.log(prim.h / anchor.ph)
    offset = normalize_angle(prim.theta - anchor.theta_prior)
    if offset == HALF_PI:
        raise ValueError("angular offset of pi/2 from the anchor prior is not encodable")
    ta = math.tan(offset)
    cats = [0.0] * num_categories
    cats[int(prim.category)] = category_margin
    p_max = float(softmax(cats).max())
    if score >= p_max:
        raise ValueError(f"score {score} unreachable with category probability {p_max}")
    tc = logit(score / p_max)
    return RawPrediction(tx, ty, tw, th, ta, tc, tuple(cats))


def decode_tensor(
    tensor: np.ndarray, layout: HeadLayout, anchors: Sequence[Anchor]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode a whole (S, S, B, 6+C) head tensor at once.

    Returns (params, categories, scores) flattened in [row][col][anchor]
    order, params being (N, 5) of cx, cy, w, h, theta.
    """
    t = np.asarray(tensor, dtype=np.float64)
    if t.shape != layout.shape:
        raise ValueError(f"tensor shape {t.shape} does not match layout {layout.shape}")
    if len(anchors) != layout.B:
        raise ValueError(f"{len(anchors)} anchors for B={layout.B}")
    pw = np.array([a.pw for a in anchors])
    ph = np.array([a.ph for a in anchors])
    prior = np.array([a.theta_prior for a in anchors])
    rows, cols = np.meshgrid(np.arange(layout.S), np.arange(layout.S), indexing="ij")
    sig = lambda v: 0.5 * (1.0 + np.tanh(0.5 * v))  # noqa: E731
    cx = (sig(t[..., 0]) + cols[..., None]) * layout.stride
    cy = (sig(t[..., 1]) + rows[..., None]) * layout.stride
    w = pw * np.exp(t[..., 2])
    h = ph * np.exp(t[..., 3])
    theta = normalize_angles(prior + np.arctan(t[..., 4]))
    logits = t[..., 6:]
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)
    cats = probs.argmax(axis=-1)
    scores = sig(t[..., 5]) * probs.max(axis=-1)
    symmetric = (cats == Category.CIRCLE) | (cats == Category.SQUARE)
    lopsided = np.abs(w - h) / np.maximum(w, h) > SYMMETRY_TOL
    cats = np.where(symmetric & lopsided, cats + 1, cats)
    params = np.stack([cx, cy, w, h, theta], axis=-1).reshape(-1, 5)
    return params, cats.reshape(-1).astype(np.int64), scores.reshape(-1)


# --- label text format: "category_id cx cy w h theta" per line

def format_primitive(p: RotatedPrimitive) -> str:
    return f"{int(p.category)} {p.cx!r} {p.cy!r} {p.w!r} {p.h!r} {p.theta!r}"


def write_labels(path: str | Path, prims: Iterable[RotatedPrimitive]) -> None:
    lines = [format_primitive(p) for p in prims]
    Path(path).write_text("".join(line + "\n" for line in lines))


def parse_primitive_fields(fields: Sequence[str], where: str) -> RotatedPrimitive:
    try:
        cat = int(fields[0])
        nums = [float(f) for f in fields[1:6]]
    except ValueError as exc:
        raise ValueError(f"{where}: {exc}") from None
    if cat not in Category._value2member_map_:
        raise ValueError(f"{where}: unknown category id {cat}")
    try:
        return RotatedPrimitive(Category(cat), *nums)
    except ValueError as exc:
        raise ValueError(f"{where}: {exc}") from None


def iter_records(path: str | Path, ncols: int):
    """Yield (lineno, fields) for non-comment, non-blank lines with `ncols` fields."""
    path = Path(path)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        fields = s.split()
        if len(fields) != ncols:
            raise ValueError(f"{path}:{lineno}: expected {ncols} fields, got {len(fields)}")
        yield lineno, fields


def read_labels(path: str | Path) -> list[RotatedPrimitive]:
    return [parse_primitive_fields(f, f"{path}:{n}") for n, f in iter_records(path, 6)]
