from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_primitive
from primgrasp.overlap import rotated_iou
from primgrasp.primitives import Category, RotatedPrimitive
from primgrasp.suppression import ScoredDetection, read_detections, rnms, rnms_arrays, write_detections

ALL = tuple(Category)


def brute_nms(dets, thr, class_aware=True):
    """Plain O(n^2) greedy reference over scalar IoU."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].source_index))
    kept = []
    for i in order:
        d = dets[i]
        if all(
            (class_aware and k.primitive.category != d.primitive.category)
            or rotated_iou(k.primitive, d.primitive) <= thr
            for k in kept
        ):
            kept.append(d)
    return kept


def random_dets(rng, n, extent=40.0, cats=ALL, ties=False):
    scores = rng.choice([0.3, 0.5, 0.8], n) if ties else rng.uniform(0, 1, n)
    return [ScoredDetection(random_primitive(rng, cats, extent), float(s), i) for i, s in enumerate(scores)]


@st.composite
def instances(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(0, 40))
    rng = np.random.default_rng(seed)
    return random_dets(rng, n, extent=draw(st.sampled_from([10.0, 40.0, 150.0])), ties=draw(st.booleans()))


def test_examples():
    assert rnms([]) == []
    p = RotatedPrimitive(Category.RECTANGLE, 10, 10, 8, 4, 0.2)
    single = [ScoredDetection(p, 0.4, 3)]
    assert rnms(single) == single
    pair = [ScoredDetection(p, 0.8, 0), ScoredDetection(p, 0.9, 1)]
    assert rnms(pair, 0.5) == [pair[1]]


def test_class_aware_only_suppresses_same_category():
    a = ScoredDetection(RotatedPrimitive(Category.RECTANGLE, 10, 10, 8, 4, 0.2), 0.9, 0)
    b = ScoredDetection(RotatedPrimitive(Category.ELLIPSE, 10, 10, 8, 4, 0.2), 0.8, 1)
    assert rnms([a, b], class_aware=True) == [a, b]
    assert rnms([a, b], class_aware=False) == [a]


def test_threshold_is_strict():
    a = RotatedPrimitive(Category.SQUARE, 0, 0, 1, 1, 0.0)
    b = RotatedPrimitive(Category.SQUARE, 0.5, 0, 1, 1, 0.0)  # IoU exactly 1/3
    dets = [ScoredDetection(a, 0.9, 0), ScoredDetection(b, 0.8, 1)]
    iou = rotated_iou(a, b)
    assert len(rnms(dets, iou)) == 2
    assert len(rnms(dets, np.nextafter(iou, 0))) == 1


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("class_aware", [True, False])
def test_matches_brute_force(seed, class_aware):
    rng = np.random.default_rng(seed)
    dets = random_dets(rng, 50, extent=float(rng.choice([15.0, 40.0, 120.0])), ties=bool(seed % 3 == 0))
    thr = float(rng.uniform(0.1, 0.7))
    ref = brute_nms(dets, thr, class_aware)
    assert rnms(dets, thr, class_aware) == ref
    assert rnms(dets, thr, class_aware, prefilter=False) == ref


@given(instances(), st.floats(0.0, 1.0), st.booleans())
def test_properties(dets, thr, class_aware):
    kept = rnms(dets, thr, class_aware)
    # idempotence
    assert rnms(kept, thr, class_aware) == kept
    # prefilter soundness
    assert rnms(dets, thr, class_aware, prefilter=False) == kept
    # sorted by descending score, ties by source index
    keys = [(-d.score, d.source_index) for d in kept]
    assert keys == sorted(keys)
    # pairwise non-suppressing
    for i, a in enumerate(kept):
        for b in kept[i + 1 :]:
            if not class_aware or a.primitive.category == b.primitive.category:
                assert rotated_iou(a.primitive, b.primitive) <= thr


@given(instances(), st.randoms(use_true_random=False))
def test_permutation_invariance(dets, rnd):
    shuffled = list(dets)
    rnd.shuffle(shuffled)
    assert rnms(shuffled) == rnms(dets)


def test_array_api_returns_indices(rng):
    dets = random_dets(rng, 30)
    idx = rnms_arrays(
        np.array([d.primitive.as_tuple() for d in dets]),
        np.array([d.primitive.category for d in dets]),
        np.array([d.score for d in dets]),
    )
    assert [dets[i] for i in idx] == rnms(dets)


def test_detection_file_round_trip(tmp_path, rng):
    dets = random_dets(rng, 12)
    path = tmp_path / "dets.txt"
    write_detections(path, dets)
    assert read_detections(path) == dets


def test_score_validation():
    p = RotatedPrimitive(Category.RECTANGLE, 0, 0, 2, 1, 0.0)
    with pytest.raises(ValueError):
        ScoredDetection(p, 1.5)
