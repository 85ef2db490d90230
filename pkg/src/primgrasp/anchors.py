"""Prior anchors: IoU k-means over label sizes, orientation lattice, target assignment."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .overlap import iou_matrix
from .primitives import Anchor, Category, HeadLayout, RotatedPrimitive, iter_records

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterConfig:
    K: int = 6
    seed: int = 0
    max_iter: int = 300
    tol: float = 1e-6

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (K, 2) sorted by area
    objective_history: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def size_iou(dims: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of co-centered axis-aligned boxes, (N, 2) x (K, 2) -> (N, K)."""
    inter = np.minimum(dims[:, None, 0], centroids[None, :, 0]) * np.minimum(dims[:, None, 1], centroids[None, :, 1])
    a = dims[:, 0] * dims[:, 1]
    b = centroids[:, 0] * centroids[:, 1]
    return inter / (a[:, None] + b[None, :] - inter)


def _seed_centroids(distinct: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # k-means++: first pick uniform, then proportional to squared IoU distance
    chosen = [int(rng.integers(len(distinct)))]
    d2 = (1.0 - size_iou(distinct, distinct[chosen])[:, 0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        idx = int(rng.choice(len(distinct), p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, (1.0 - size_iou(distinct, distinct[[idx]])[:, 0]) ** 2)
    return distinct[chosen].copy()


def kmeans_iou(dims: np.ndarray, config: ClusterConfig) -> KMeansResult:
    """k-means on (w, h) pairs under the 1 - IoU distance.

    A cluster's mean replaces its centroid only when that does not raise the
    cluster's summed distance, so the objective never increases.
    """
    dims = np.asarray(dims, dtype=np.float64).reshape(-1, 2)
    if len(dims) == 0:
        raise ValueError("cannot cluster an empty label set")
    if np.any(dims <= 0) or not np.all(np.isfinite(dims)):
        raise ValueError("label dimensions must be positive and finite")
    # canonical order makes the result independent of label order
    dims = dims[np.lexsort((dims[:, 1], dims[:, 0]))]
    distinct = np.unique(dims, axis=0)
    if config.K > len(distinct):
        raise ValueError(f"K={config.K} exceeds the {len(distinct)} distinct label dimensions")
    rng = np.random.default_rng(config.seed)
    centroids = _seed_centroids(distinct, config.K, rng)

    def assign(c):
        dist = 1.0 - size_iou(dims, c)
        nearest = dist.argmin(axis=1)
        return nearest, dist[np.arange(len(dims)), nearest]

    nearest, d = assign(centroids)
    result = KMeansResult(centroids, [float(d.mean())])
    for it in range(1, config.max_iter + 1):
        updated = centroids.copy()
        for k in range(len(centroids)):
            members = dims[nearest == k]
            if len(members) == 0:
                continue
            cand = members.mean(axis=0)
            old_cost = (1.0 - size_iou(members, centroids[[k]])).sum()
            new_cost = (1.0 - size_iou(members, cand[None, :])).sum()
            if new_cost <= old_cost:
                updated[k] = cand
        shift = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        centroids = updated
        nearest, d = assign(centroids)
        result.objective_history.append(float(d.mean()))
        result.iterations = it
        if shift < config.tol:
            result.converged = True
            break
    order = np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")
    result.centroids = centroids[order]
    return result


def cluster_dims(labels: Sequence[RotatedPrimitive], config: ClusterConfig) -> np.ndarray:
    """K anchor (w, h) centroids from label sizes, sorted by area."""
    if not labels:
        raise ValueError("cannot cluster an empty label set")
    return kmeans_iou(np.array([(p.w, p.h) for p in labels]), config).centroids


def angle_priors(angle_count: int) -> np.ndarray:
    if angle_count < 1:
        raise ValueError(f"angle_count must be >= 1, got {angle_count}")
    k = np.arange(angle_count)
    return -math.pi / 2 + math.pi * (k + 0.5) / angle_count


def build_rotated_anchors(centroids, angle_count: int) -> list[Anchor]:
    """Cross every centroid with evenly spaced orientation priors (dimension-major)."""
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    if len(centroids) == 0:
        raise ValueError("need at least one centroid")
    priors = angle_priors(angle_count)
    return [Anchor(float(w), float(h), float(t)) for w, h in centroids for t in priors]


@dataclass
class Assignment:
    """Responsible (cell, anchor) slots, indexed [row, col, anchor]."""

    obj_mask: np.ndarray
    noobj_mask: np.ndarray
    matched_gt: np.ndarray  # gt index per slot, -1 where no object

    def slots(self) -> list[tuple[int, int, int, int]]:
        """(row, col, anchor, gt_index) for every responsible slot, in slot order."""
        rows, cols, bs = np.nonzero(self.obj_mask)
        return [(int(r), int(c), int(b), int(self.matched_gt[r, c, b])) for r, c, b in zip(rows, cols, bs)]


def anchor_shapes(anchors: Sequence[Anchor], cx: float, cy: float) -> np.ndarray:
    return np.array([[cx, cy, a.pw, a.ph, a.theta_prior] for a in anchors])


def assign_targets(gts: Sequence[RotatedPrimitive], anchors: Sequence[Anchor], layout: HeadLayout) -> Assignment:
    """Give each ground truth to the best-overlapping free anchor in the cell holding its center.

    Anchors take the ground truth's outline (ellipse for circles and
    ellipses, rectangle otherwise) and sit at the cell center.
    """
    if len(anchors) != layout.B:
        raise ValueError(f"{len(anchors)} anchors for B={layout.B}")
    shape = (layout.S, layout.S, layout.B)
    obj = np.zeros(shape, dtype=bool)
    matched = np.full(shape, -1, dtype=np.int64)
    for g, gt in enumerate(gts):
        cell = layout.cell_of(gt.cx, gt.cy)
        ccx, ccy = cell.center
        outline = Category.ELLIPSE if gt.category.elliptic else Category.RECTANGLE
        ious = iou_matrix(
            np.array([gt.as_tuple()]), [gt.category],
            anchor_shapes(anchors, ccx, ccy), [outline] * len(anchors),
        )[0]
        ranked = np.argsort(-ious, kind="stable")
        for pick, b in enumerate(ranked):
            if not obj[cell.row, cell.col, b]:
                break
        else:
            raise ValueError(f"ground truth {g}: all {layout.B} anchors in cell ({cell.col}, {cell.row}) are taken")
        if pick:
            log.warning("ground truth %d shares its best slot; using anchor %d (rank %d)", g, b, pick)
        obj[cell.row, cell.col, b] = True
        matched[cell.row, cell.col, b] = g
    return Assignment(obj, ~obj, matched)


# --- anchor file: "pw ph theta_prior" per line, header comment with K/angle_count/seed

def write_anchors(path: str | Path, anchors: Sequence[Anchor], K: int, angle_count: int, seed: int) -> None:
    lines = [f"# K={K} angle_count={angle_count} seed={seed}"]
    lines += [f"{a.pw!r} {a.ph!r} {a.theta_prior!r}" for a in anchors]
    Path(path).write_text("\n".join(lines) + "\n")


def read_anchors(path: str | Path) -> tuple[list[Anchor], dict[str, int]]:
    path = Path(path)
    header: dict[str, int] = {}
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            header.update({k: int(v) for k, v in re.findall(r"(\w+)=(-?\d+)", line)})
    anchors = []
    for lineno, fields in iter_records(path, 3):
        try:
            anchors.append(Anchor(*(float(f) for f in fields)))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not anchors:
        raise ValueError(f"{path}: no anchors")
    return anchors, header
