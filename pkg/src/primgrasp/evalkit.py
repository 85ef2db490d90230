"""Detection-vs-ground-truth matching and precision/recall at a rotated-IoU threshold."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .overlap import iou_matrix
from .primitives import RotatedPrimitive
from .suppression import ScoredDetection, score_order


@dataclass
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    # (detection index, gt index, iou) in matching order
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


def pairwise_iou(dets: Sequence[ScoredDetection], gts: Sequence[RotatedPrimitive]) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    return iou_matrix(
        [d.primitive.as_tuple() for d in dets], [d.primitive.category for d in dets],
        [g.as_tuple() for g in gts], [g.category for g in gts],
    )


def match_detections(
    dets: Sequence[ScoredDetection],
    gts: Sequence[RotatedPrimitive],
    iou_thr: float = 0.5,
    require_category: bool = True,
) -> MatchResult:
    """Greedy matching in descending score order.

    Each detection takes the highest-IoU unmatched ground truth with IoU >=
    `iou_thr` (same category when required; lower gt index on ties).
    """
    ious = pairwise_iou(dets, gts)
    if require_category and len(dets) and len(gts):
        same = np.array([[d.primitive.category == g.category for g in gts] for d in dets])
        ious = np.where(same, ious, -1.0)
    order = score_order(np.array([d.score for d in dets]), np.array([d.source_index for d in dets])) if dets else []
    taken = np.zeros(len(gts), dtype=bool)
    pairs = []
    for i in order:
        if not len(gts):
            break
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr and cand[j] >= 0:
            taken[j] = True
            pairs.append((int(i), j, float(ious[i, j])))
    tp = len(pairs)
    return MatchResult(tp, len(dets) - tp, len(gts) - tp, pairs)


def precision_recall(result: MatchResult) -> tuple[float, float]:
    tp, fp, fn = result.true_positives, result.false_positives, result.false_negatives
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def average_precision(
    dets: Sequence[ScoredDetection],
    gts: Sequence[RotatedPrimitive],
    iou_thr: float = 0.5,
    require_category: bool = True,
) -> float:
    """All-point interpolated AP at one IoU threshold."""
    if not gts:
        return 1.0 if not dets else 0.0
    result = match_detections(dets, gts, iou_thr, require_category)
    matched = {i for i, _, _ in result.pairs}
    order = score_order(np.array([d.score for d in dets]), np.array([d.source_index for d in dets])) if dets else []
    hits = np.array([i in matched for i in order], dtype=float)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = np.concatenate([[0.0], tp / len(gts), [1.0]])
    precision = np.concatenate([[1.0], tp / np.maximum(tp + fp, 1e-12), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(recall) * precision[1:]))


def format_metrics_line(name: str, result: MatchResult) -> str:
    p, r = precision_recall(result)
    return (
        f"{name} tp={result.true_positives} fp={result.false_positives} fn={result.false_negatives} "
        f"precision={p:.6f} recall={r:.6f}"
    )


def metrics_report(per_scene: Sequence[tuple[str, MatchResult]], iou_thr: float) -> str:
    """One line per scene plus a pooled summary line."""
    lines = [format_metrics_line(name, res) for name, res in per_scene]
    pooled = MatchResult(
        sum(r.true_positives for _, r in per_scene),
        sum(r.false_positives for _, r in per_scene),
        sum(r.false_negatives for _, r in per_scene),
    )
    lines.append(format_metrics_line("summary", pooled) + f" iou_thr={iou_thr:g} scenes={len(per_scene)}")
    return "\n".join(lines) + "\n"


def parse_metrics_summary(text: str) -> dict[str, float]:
    for line in text.splitlines():
        if line.startswith("summary "):
            return {k: float(v) for k, v in (tok.split("=") for tok in line.split()[1:])}
    raise ValueError("no summary line in metrics report")
