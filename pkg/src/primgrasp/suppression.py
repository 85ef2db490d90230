"""Greedy rotated non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .overlap import DEFAULT_SEGMENTS, _intersection_area, _iou, pack_polygons
from .primitives import RotatedPrimitive, format_primitive, iter_records, parse_primitive_fields

DEFAULT_IOU_THRESHOLD = 0.5
# keeps the IoU upper-bound rejection clear of rounding at the threshold
_BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class ScoredDetection:
    primitive: RotatedPrimitive
    score: float
    source_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "source_index", int(self.source_index))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def score_order(scores: np.ndarray, source_index: np.ndarray) -> np.ndarray:
    """Descending score, ties broken by lower source index."""
    return np.lexsort((source_index, -np.asarray(scores, dtype=np.float64)))


@numba.njit(cache=True)
def _bucket_grid(boxes, groups, ngroups, order):
    """Uniform grid over the boxes' extent, one layer per suppression group.

    Each box is listed in every cell it touches, in rank order, so a cell's
    members can be consumed front to back as the greedy pass advances.
    Buckets are CSR (`starts`, `members`); member boxes are copied alongside
    for locality.
    """
    n = boxes.shape[0]
    x0 = boxes[:, 0].min()
    y0 = boxes[:, 1].min()
    x1 = boxes[:, 2].max()
    y1 = boxes[:, 3].max()
    mean_extent = 0.0
    for i in range(n):
        mean_extent += max(boxes[i, 2] - boxes[i, 0], boxes[i, 3] - boxes[i, 1])
    cell = max(mean_extent / n, 1e-9)
    # cap the cell count near 4n
    while ((x1 - x0) / cell + 1.0) * ((y1 - y0) / cell + 1.0) > 4.0 * n + 16.0:
        cell *= 1.5
    nx = int((x1 - x0) / cell) + 1
    ny = int((y1 - y0) / cell) + 1
    layer = nx * ny
    counts = np.zeros(layer * ngroups + 1, dtype=np.int64)
    for i in range(n):
        base = groups[i] * layer
        for gy in range(int((boxes[i, 1] - y0) / cell), int((boxes[i, 3] - y0) / cell) + 1):
            for gx in range(int((boxes[i, 0] - x0) / cell), int((boxes[i, 2] - x0) / cell) + 1):
                counts[base + gy * nx + gx + 1] += 1
    starts = np.cumsum(counts)
    fill = starts[:-1].copy()
    members = np.empty(starts[-1], dtype=np.int64)
    member_boxes = np.empty((starts[-1], 4))
    for r in range(n):
        i = order[r]
        base = groups[i] * layer
        for gy in range(int((boxes[i, 1] - y0) / cell), int((boxes[i, 3] - y0) / cell) + 1):
            for gx in range(int((boxes[i, 0] - x0) / cell), int((boxes[i, 2] - x0) / cell) + 1):
                k = base + gy * nx + gx
                members[fill[k]] = i
                for c in range(4):
                    member_boxes[fill[k], c] = boxes[i, c]
                fill[k] += 1
    return x0, y0, cell, nx, layer, starts, members, member_boxes


@numba.njit(cache=True)
def _greedy(verts, counts, areas, obbs, boxes, groups, ngroups, order, thr, prefilter):
    n = order.shape[0]
    rank = np.empty(n, dtype=np.int64)
    for r in range(n):
        rank[order[r]] = r
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    nkeep = 0
    cap = verts.shape[1] * 2 + 2
    buf_a = np.empty((cap, 2))
    buf_b = np.empty((cap, 2))
    obb_a = np.empty((10, 2))
    obb_b = np.empty((10, 2))
    if prefilter:
        x0, y0, cell, nx, layer, starts, members, mboxes = _bucket_grid(boxes, groups, ngroups, order)
        head = starts[:-1].copy()
        stamp = np.full(n, -1, dtype=np.int64)
    for r in range(n):
        i = order[r]
        if suppressed[i]:
            continue
        keep[nkeep] = i
        nkeep += 1
        if not prefilter:
            for q in range(r + 1, n):
                j = order[q]
                if suppressed[j] or groups[j] != groups[i]:
                    continue
                if _iou(verts[i], counts[i], areas[i], verts[j], counts[j], areas[j], buf_a, buf_b) > thr:
                    suppressed[j] = True
            continue
        bx0 = boxes[i, 0]
        by0 = boxes[i, 1]
        bx1 = boxes[i, 2]
        by1 = boxes[i, 3]
        base = groups[i] * layer
        for gy in range(int((by0 - y0) / cell), int((by1 - y0) / cell) + 1):
            for gx in range(int((bx0 - x0) / cell), int((bx1 - x0) / cell) + 1):
                k = base + gy * nx + gx
                q = head[k]
                end = starts[k + 1]
                while q < end and rank[members[q]] <= r:
                    q += 1
                head[k] = q
                while q < end:
                    j = members[q]
                    ox = min(bx1, mboxes[q, 2]) - max(bx0, mboxes[q, 0])
                    oy = min(by1, mboxes[q, 3]) - max(by0, mboxes[q, 1])
                    q += 1
                    if ox < 0.0 or oy < 0.0 or suppressed[j] or stamp[j] == i:
                        continue
                    stamp[j] = i
                    # the intersection can be no larger than the box overlap or either shape
                    bound = min(ox * oy, areas[i], areas[j])
                    if bound < (thr - _BOUND_SLACK) * (areas[i] + areas[j] - bound):
                        continue
                    if counts[i] > 4 or counts[j] > 4:
                        # elliptic shapes sit inside their oriented rectangles
                        bound = min(bound, _intersection_area(obbs[i], 4, obbs[j], 4, obb_a, obb_b))
                        if bound < (thr - _BOUND_SLACK) * (areas[i] + areas[j] - bound):
                            continue
                    if _iou(verts[i], counts[i], areas[i], verts[j], counts[j], areas[j], buf_a, buf_b) > thr:
                        suppressed[j] = True
    return keep[:nkeep]


def rnms_arrays(
    params: np.ndarray,
    categories: np.ndarray,
    scores: np.ndarray,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    class_aware: bool = True,
    prefilter: bool = True,
    source_index: np.ndarray | None = None,
    segments: int = DEFAULT_SEGMENTS,
) -> np.ndarray:
    """Array form of `rnms`; returns kept row indices in descending score order.

    With `prefilter`, exact clipping is skipped for pairs whose axis-aligned
    bounding boxes are disjoint or whose IoU upper bound (from the box
    overlap and the two areas) stays below the threshold; neither test can
    change the result.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    params = np.asarray(params, dtype=np.float64).reshape(-1, 5)
    n = len(params)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    categories = np.asarray(categories, dtype=np.int64).reshape(-1)
    src = np.arange(n) if source_index is None else np.asarray(source_index)
    order = score_order(scores, src).astype(np.int64)
    pb = pack_polygons(params, categories, segments)
    if class_aware:
        _, groups = np.unique(categories, return_inverse=True)
    else:
        groups = np.zeros(n, dtype=np.int64)
    groups = groups.astype(np.int64)
    return _greedy(
        pb.verts, pb.counts, pb.areas, pb.obbs, pb.boxes, groups, int(groups.max()) + 1,
        order, float(iou_threshold), bool(prefilter),
    )


def rnms(
    detections: Sequence[ScoredDetection],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    class_aware: bool = True,
    prefilter: bool = True,
) -> list[ScoredDetection]:
    """Keep the highest-scoring detections, dropping any whose rotated IoU with
    an already-kept one (of the same category when `class_aware`) exceeds the
    threshold."""
    if not detections:
        return []
    params = np.array([d.primitive.as_tuple() for d in detections])
    cats = np.array([int(d.primitive.category) for d in detections])
    scores = np.array([d.score for d in detections])
    src = np.array([d.source_index for d in detections])
    keep = rnms_arrays(params, cats, scores, iou_threshold, class_aware, prefilter, src)
    return [detections[i] for i in keep]


# --- detection text format: "category_id cx cy w h theta score" per line

def write_detections(path, detections: Sequence[ScoredDetection]) -> None:
    Path(path).write_text("".join(f"{format_primitive(d.primitive)} {d.score!r}\n" for d in detections))


def read_detections(path) -> list[ScoredDetection]:
    """Source indices are assigned in file order."""
    out = []
    for lineno, fields in iter_records(path, 7):
        where = f"{path}:{lineno}"
        prim = parse_primitive_fields(fields[:6], where)
        try:
            out.append(ScoredDetection(prim, float(fields[6]), len(out)))
        except ValueError as exc:
            raise ValueError(f"{where}: {exc}") from None
    return out
