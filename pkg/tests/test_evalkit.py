from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_primitive
from primgrasp.evalkit import (
    MatchResult,
    average_precision,
    match_detections,
    metrics_report,
    parse_metrics_summary,
    precision_recall,
)
from primgrasp.overlap import rotated_iou
from primgrasp.primitives import Category, RotatedPrimitive
from primgrasp.suppression import ScoredDetection

ALL = tuple(Category)


def reference_greedy(dets, gts, thr):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].source_index))
    taken, tp = set(), 0
    for i in order:
        best, best_j = -1.0, None
        for j, g in enumerate(gts):
            if j in taken or g.category != dets[i].primitive.category:
                continue
            v = rotated_iou(dets[i].primitive, g)
            if v > best:
                best, best_j = v, j
        if best_j is not None and best >= thr:
            taken.add(best_j)
            tp += 1
    return tp


def max_matching(dets, gts, thr):
    """Exhaustive search over all detection-to-gt assignments."""
    ok = [[g.category == d.primitive.category and rotated_iou(d.primitive, g) >= thr for g in gts] for d in dets]
    best = 0
    for perm in itertools.permutations(range(len(gts)), min(len(dets), len(gts))):
        for dsub in itertools.combinations(range(len(dets)), len(perm)):
            best = max(best, sum(ok[i][j] for i, j in zip(dsub, perm)))
    return best


def jittered(rng, gts, n_extra, sigma=1.5):
    dets = []
    for i, g in enumerate(gts):
        p = RotatedPrimitive(g.category, g.cx + rng.normal(0, sigma), g.cy + rng.normal(0, sigma), g.w, g.h, g.theta)
        dets.append(ScoredDetection(p, float(rng.uniform(0, 1)), i))
    for k in range(n_extra):
        dets.append(ScoredDetection(random_primitive(rng, ALL, 30.0), float(rng.uniform(0, 1)), len(gts) + k))
    return dets


def test_identical_and_empty():
    rng = np.random.default_rng(0)
    gts = [random_primitive(rng, ALL, 100.0) for _ in range(4)]
    dets = [ScoredDetection(g, 0.9, i) for i, g in enumerate(gts)]
    r = match_detections(dets, gts)
    assert (r.true_positives, r.false_positives, r.false_negatives) == (4, 0, 0)
    r = match_detections([], gts)
    assert (r.true_positives, r.false_positives, r.false_negatives) == (0, 0, 4)
    r = match_detections(dets, [])
    assert (r.true_positives, r.false_positives, r.false_negatives) == (0, 4, 0)


def test_precision_recall_examples():
    assert precision_recall(MatchResult(4, 0, 0)) == (1.0, 1.0)
    assert precision_recall(MatchResult(0, 0, 3)) == (1.0, 0.0)
    assert precision_recall(MatchResult(3, 1, 1)) == (0.75, 0.75)
    assert precision_recall(MatchResult(0, 0, 0)) == (1.0, 1.0)


def test_category_required():
    g = RotatedPrimitive(Category.RECTANGLE, 10, 10, 8, 4, 0.1)
    d = ScoredDetection(RotatedPrimitive(Category.ELLIPSE, 10, 10, 8, 4, 0.1), 0.9)
    assert match_detections([d], [g]).true_positives == 0
    assert match_detections([d], [g], require_category=False).true_positives == 1


def test_higher_score_claims_gt_first():
    g = RotatedPrimitive(Category.SQUARE, 0, 0, 1, 1, 0.0)
    exact = ScoredDetection(g, 0.5, 0)
    off = ScoredDetection(RotatedPrimitive(Category.SQUARE, 0.2, 0, 1, 1, 0.0), 0.9, 1)
    r = match_detections([exact, off], [g])
    assert r.pairs[0][0] == 1
    assert r.false_positives == 1


@pytest.mark.parametrize("seed", range(25))
def test_small_instances_against_exhaustive(seed):
    rng = np.random.default_rng(seed)
    gts = [random_primitive(rng, ALL, 30.0) for _ in range(4)]
    dets = jittered(rng, gts, 1)
    thr = 0.5
    r = match_detections(dets, gts, thr)
    assert r.true_positives == reference_greedy(dets, gts, thr)
    assert r.true_positives <= max_matching(dets, gts, thr)


@pytest.mark.parametrize("seed", range(10))
def test_separated_instances_reach_optimum(seed):
    rng = np.random.default_rng(seed)
    gts = [RotatedPrimitive(Category.RECTANGLE, 100.0 * i, 0.0, 40.0, 20.0, float(rng.uniform(-1, 1))) for i in range(4)]
    dets = jittered(rng, gts, 0, sigma=0.5)
    dets.append(ScoredDetection(RotatedPrimitive(Category.RECTANGLE, 1000, 0, 5, 5, 0.0), 0.99, 9))
    r = match_detections(dets, gts, 0.5)
    assert r.true_positives == max_matching(dets, gts, 0.5) == 4


@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1), st.floats(-200, 200), st.floats(-200, 200))
def test_properties(seed, t1, t2, dx, dy):
    rng = np.random.default_rng(seed)
    gts = [random_primitive(rng, ALL, 30.0) for _ in range(int(rng.integers(0, 6)))]
    dets = jittered(rng, gts, int(rng.integers(0, 4)))
    lo, hi = sorted((t1, t2))
    r_lo, r_hi = match_detections(dets, gts, lo), match_detections(dets, gts, hi)
    for r in (r_lo, r_hi):
        assert r.true_positives + r.false_negatives == len(gts)
        assert r.true_positives + r.false_positives == len(dets)
    assert r_hi.true_positives <= r_lo.true_positives

    def shift(p):
        return RotatedPrimitive(p.category, p.cx + dx, p.cy + dy, p.w, p.h, p.theta)

    moved = match_detections([ScoredDetection(shift(d.primitive), d.score, d.source_index) for d in dets],
                             [shift(g) for g in gts], lo)
    assert [(i, j) for i, j, _ in moved.pairs] == [(i, j) for i, j, _ in r_lo.pairs]


def test_average_precision():
    g = [RotatedPrimitive(Category.RECTANGLE, 50.0 * i, 0, 20, 10, 0.0) for i in range(2)]
    perfect = [ScoredDetection(p, 0.9, i) for i, p in enumerate(g)]
    assert average_precision(perfect, g) == pytest.approx(1.0)
    fp_first = [ScoredDetection(RotatedPrimitive(Category.RECTANGLE, 500, 0, 5, 5, 0.0), 0.95, 5)] + perfect
    # precision at recall 0.5 and 1.0 is 1/2 and 2/3; interpolated AP = 0.5*2/3 + 0.5*2/3
    assert average_precision(fp_first, g) == pytest.approx(2 / 3)
    assert average_precision([], []) == 1.0


def test_metrics_report_round_trip():
    text = metrics_report([("a", MatchResult(3, 1, 0)), ("b", MatchResult(1, 0, 1))], 0.5)
    lines = text.splitlines()
    assert lines[0].startswith("a tp=3 fp=1 fn=0")
    summary = parse_metrics_summary(text)
    assert summary["tp"] == 4 and summary["precision"] == 0.8 and summary["recall"] == 0.8
    assert summary["iou_thr"] == 0.5 and summary["scenes"] == 2
    with pytest.raises(ValueError):
        parse_metrics_summary("nothing\n")
