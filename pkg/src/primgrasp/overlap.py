"""Convex polygon clipping and rotated IoU.

Rectangles are exact 4-gons; ellipses are inscribed polygons sampled at
equal parameter steps. Every overlap goes through one Sutherland-Hodgman
kernel, compiled with numba so the scalar API and the batched NMS path share
the same arithmetic.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numba
import numpy as np

from .primitives import Category, RotatedPrimitive

DEFAULT_SEGMENTS = 32
# intersections below this area are reported as empty
AREA_EPS = 1e-12


def polygon_vertices(cx, cy, w, h, theta, elliptic, segments=DEFAULT_SEGMENTS):
    """CCW vertex array (n, 2) for a rotated rectangle or inscribed ellipse polygon."""
    cat = Category.ELLIPSE if elliptic else Category.RECTANGLE
    verts, counts, _ = polygons_batch(np.array([[cx, cy, w, h, theta]]), np.array([cat]), segments)
    return verts[0, : counts[0]]


def to_polygon(prim: RotatedPrimitive, segments: int = DEFAULT_SEGMENTS) -> np.ndarray:
    """Polygon for a primitive; circles ignore theta so equal circles overlay exactly."""
    if segments < 4:
        raise ValueError(f"segments must be >= 4, got {segments}")
    verts, counts, _ = polygons_batch(np.array([prim.as_tuple()]), np.array([prim.category]), segments)
    return verts[0, : counts[0]]


@numba.njit(cache=True)
def _shoelace(p, n):
    acc = 0.0
    for i in range(n):
        j = i + 1 if i + 1 < n else 0
        acc += p[i, 0] * p[j, 1] - p[j, 0] * p[i, 1]
    return 0.5 * acc


@numba.njit(cache=True)
def _clip_into(subj, ns, win, nw, buf_a, buf_b):
    """Clip subj[:ns] by the CCW convex window win[:nw].

    Result is written to buf_a or buf_b; returns (which, count) with which=0
    for buf_a.
    """
    for i in range(ns):
        buf_a[i, 0] = subj[i, 0]
        buf_a[i, 1] = subj[i, 1]
    n = ns
    src_is_a = True
    for e in range(nw):
        if n == 0:
            break
        ax = win[e, 0]
        ay = win[e, 1]
        f = e + 1 if e + 1 < nw else 0
        ex = win[f, 0] - ax
        ey = win[f, 1] - ay
        src = buf_a if src_is_a else buf_b
        dst = buf_b if src_is_a else buf_a
        m = 0
        px = src[n - 1, 0]
        py = src[n - 1, 1]
        pd = ex * (py - ay) - ey * (px - ax)
        for k in range(n):
            qx = src[k, 0]
            qy = src[k, 1]
            qd = ex * (qy - ay) - ey * (qx - ax)
            if qd >= 0.0:
                if pd < 0.0:
                    t = pd / (pd - qd)
                    dst[m, 0] = px + t * (qx - px)
                    dst[m, 1] = py + t * (qy - py)
                    m += 1
                dst[m, 0] = qx
                dst[m, 1] = qy
                m += 1
            elif pd >= 0.0:
                t = pd / (pd - qd)
                dst[m, 0] = px + t * (qx - px)
                dst[m, 1] = py + t * (qy - py)
                m += 1
            px = qx
            py = qy
            pd = qd
        n = m
        src_is_a = not src_is_a
    return (0 if src_is_a else 1), n


@numba.njit(cache=True)
def _intersection_area(pa, na, pb, nb, buf_a, buf_b):
    which, n = _clip_into(pa, na, pb, nb, buf_a, buf_b)
    if n < 3:
        return 0.0
    a = _shoelace(buf_a if which == 0 else buf_b, n)
    return a if a > AREA_EPS else 0.0


@numba.njit(cache=True)
def _iou(pa, na, area_a, pb, nb, area_b, buf_a, buf_b):
    inter = _intersection_area(pa, na, pb, nb, buf_a, buf_b)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    v = inter / union
    return 1.0 if v > 1.0 else v


def _as_poly(p) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(p, dtype=np.float64).reshape(-1, 2))


def area(poly) -> float:
    """Shoelace area; empty or degenerate polygons give 0."""
    p = _as_poly(poly)
    if len(p) < 3:
        return 0.0
    return max(float(_shoelace(p, len(p))), 0.0)


def clip(subject, window) -> np.ndarray:
    """Intersection of two CCW convex polygons; (0, 2) array when empty."""
    s, w = _as_poly(subject), _as_poly(window)
    if len(s) < 3 or len(w) < 3:
        return np.empty((0, 2))
    cap = len(s) + len(w) + 2
    buf_a, buf_b = np.empty((cap, 2)), np.empty((cap, 2))
    which, n = _clip_into(s, len(s), w, len(w), buf_a, buf_b)
    out = (buf_a if which == 0 else buf_b)[:n].copy()
    if n < 3 or _shoelace(out, n) <= AREA_EPS:
        return np.empty((0, 2))
    return out


def polygon_iou(pa, pb) -> float:
    a, b = _as_poly(pa), _as_poly(pb)
    cap = len(a) + len(b) + 2
    return float(_iou(a, len(a), area(a), b, len(b), area(b), np.empty((cap, 2)), np.empty((cap, 2))))


def rotated_iou(a: RotatedPrimitive, b: RotatedPrimitive, segments: int = DEFAULT_SEGMENTS) -> float:
    return polygon_iou(to_polygon(a, segments), to_polygon(b, segments))


# --- batched representation used by suppression and evaluation

def _unit_circle(segments: int) -> np.ndarray:
    t = 2.0 * math.pi * np.arange(segments) / segments
    return np.ascontiguousarray(np.stack([np.cos(t), np.sin(t)], axis=1))


@numba.njit(cache=True)
def _build_polygons(params, kinds, circle_table, verts, obbs, boxes):
    # kinds: 0 rectangle, 1 ellipse, 2 circle (orientation ignored)
    corner_x = (-1.0, 1.0, 1.0, -1.0)
    corner_y = (-1.0, -1.0, 1.0, 1.0)
    areas = np.empty(params.shape[0])
    for i in range(params.shape[0]):
        cx = params[i, 0]
        cy = params[i, 1]
        hw = 0.5 * params[i, 2]
        hh = 0.5 * params[i, 3]
        theta = 0.0 if kinds[i] == 2 else params[i, 4]
        c = math.cos(theta)
        s = math.sin(theta)
        for k in range(4):
            lx = corner_x[k] * hw
            ly = corner_y[k] * hh
            obbs[i, k, 0] = lx * c - ly * s + cx
            obbs[i, k, 1] = lx * s + ly * c + cy
        if kinds[i] == 0:
            n = 4
            for k in range(4):
                verts[i, k, 0] = obbs[i, k, 0]
                verts[i, k, 1] = obbs[i, k, 1]
        else:
            n = circle_table.shape[0]
            for k in range(n):
                lx = hw * circle_table[k, 0]
                ly = hh * circle_table[k, 1]
                verts[i, k, 0] = lx * c - ly * s + cx
                verts[i, k, 1] = lx * s + ly * c + cy
        boxes[i, 0] = verts[i, 0, 0]
        boxes[i, 1] = verts[i, 0, 1]
        boxes[i, 2] = verts[i, 0, 0]
        boxes[i, 3] = verts[i, 0, 1]
        for k in range(1, n):
            boxes[i, 0] = min(boxes[i, 0], verts[i, k, 0])
            boxes[i, 1] = min(boxes[i, 1], verts[i, k, 1])
            boxes[i, 2] = max(boxes[i, 2], verts[i, k, 0])
            boxes[i, 3] = max(boxes[i, 3], verts[i, k, 1])
        a = _shoelace(verts[i], n)
        areas[i] = a if a > 0.0 else 0.0
    return areas


class PolygonBatch(NamedTuple):
    """N primitives packed for the jitted kernels.

    `verts` is padded to the largest vertex count; `obbs` holds each shape's
    oriented bounding rectangle and `boxes` its (xmin, ymin, xmax, ymax).
    """

    verts: np.ndarray
    counts: np.ndarray
    areas: np.ndarray
    obbs: np.ndarray
    boxes: np.ndarray


def pack_polygons(params: np.ndarray, categories: np.ndarray, segments: int = DEFAULT_SEGMENTS) -> PolygonBatch:
    params = np.ascontiguousarray(np.asarray(params, dtype=np.float64).reshape(-1, 5))
    categories = np.asarray(categories).reshape(-1)
    n = len(params)
    kinds = np.zeros(n, dtype=np.int64)
    kinds[categories == Category.ELLIPSE] = 1
    kinds[categories == Category.CIRCLE] = 2
    elliptic = kinds > 0
    vmax = segments if elliptic.any() else 4
    verts = np.zeros((n, vmax, 2))
    obbs = np.zeros((n, 4, 2))
    boxes = np.zeros((n, 4))
    counts = np.where(elliptic, segments, 4).astype(np.int64)
    areas = _build_polygons(params, kinds, _unit_circle(segments), verts, obbs, boxes)
    return PolygonBatch(verts, counts, areas, obbs, boxes)


def polygons_batch(params: np.ndarray, categories: np.ndarray, segments: int = DEFAULT_SEGMENTS):
    """Pack N primitives into a padded (N, V, 2) vertex array.

    Returns (verts, counts, areas). `to_polygon` goes through the same
    routine, so batched and scalar IoU agree bitwise.
    """
    batch = pack_polygons(params, categories, segments)
    return batch.verts, batch.counts, batch.areas


@numba.njit(cache=True)
def _iou_matrix(va, ca, aa, vb, cb, ab):
    na = va.shape[0]
    nb = vb.shape[0]
    cap = va.shape[1] + vb.shape[1] + 2
    buf_a = np.empty((cap, 2))
    buf_b = np.empty((cap, 2))
    out = np.zeros((na, nb))
    for i in range(na):
        for j in range(nb):
            out[i, j] = _iou(va[i], ca[i], aa[i], vb[j], cb[j], ab[j], buf_a, buf_b)
    return out


def iou_matrix(params_a, cats_a, params_b, cats_b, segments: int = DEFAULT_SEGMENTS) -> np.ndarray:
    """Pairwise rotated IoU between two batches of primitives."""
    params_a = np.asarray(params_a, dtype=np.float64).reshape(-1, 5)
    params_b = np.asarray(params_b, dtype=np.float64).reshape(-1, 5)
    if len(params_a) == 0 or len(params_b) == 0:
        return np.zeros((len(params_a), len(params_b)))
    va, ca, aa = polygons_batch(params_a, cats_a, segments)
    vb, cb, ab = polygons_batch(params_b, cats_b, segments)
    return _iou_matrix(va, ca, aa, vb, cb, ab)
