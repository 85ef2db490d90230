"""Multi-task detection loss over a raw head tensor, with analytic gradients.

Predictions are the raw (S, S, B, 6+C) tensor; gradients are taken with
respect to its entries. Responsible-slot confidence targets are the rotated
IoU between the decoded box and its ground truth, held constant for
differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .anchors import Assignment, angle_priors, assign_targets
from .overlap import iou_matrix
from .primitives import Anchor, Category, HeadLayout, RotatedPrimitive, normalize_angles

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    reg: float = 1.0
    angle: float = 1.0
    obj: float = 1.0
    noobj: float = 0.5

    def __post_init__(self):
        vals = (self.reg, self.angle, self.obj, self.noobj)
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValueError(f"loss weights must be finite and >= 0, got {vals}")
        if not any(vals):
            raise ValueError("at least one loss weight must be non-zero")


@dataclass(frozen=True)
class LossBreakdown:
    reg: float
    angle: float
    obj: float
    noobj: float
    total: float

    def report(self) -> str:
        rows = [("reg", self.reg), ("angle", self.angle), ("obj", self.obj), ("noobj", self.noobj), ("total", self.total)]
        return "".join(f"{name} {value:.9g}\n" for name, value in rows)


def bce(x, x_hat):
    """Binary cross-entropy of prediction x against target x_hat; x is clamped to [EPS, 1-EPS]."""
    xc = np.clip(x, EPS, 1.0 - EPS)
    out = -x_hat * np.log(xc) - (1.0 - x_hat) * np.log1p(-xc)
    return float(out) if np.ndim(out) == 0 else out


def bce_grad(x, x_hat):
    """d bce / dx; zero where the clamp is active."""
    x = np.asarray(x, dtype=np.float64)
    inside = (x > EPS) & (x < 1.0 - EPS)
    xc = np.clip(x, EPS, 1.0 - EPS)
    g = np.where(inside, (xc - x_hat) / (xc * (1.0 - xc)), 0.0)
    return float(g) if g.ndim == 0 else g


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


class _Slots:
    """Responsible-slot views of the tensor and matched targets."""

    def __init__(self, tensor, gts, assignment, anchors, layout):
        t = np.asarray(tensor, dtype=np.float64)
        if t.shape != layout.shape:
            raise ValueError(f"tensor shape {t.shape} does not match layout {layout.shape}")
        if len(anchors) != layout.B:
            raise ValueError(f"{len(anchors)} anchors for B={layout.B}")
        slots = assignment.slots()
        self.t = t
        self.layout = layout
        self.rows = np.array([s[0] for s in slots], dtype=np.int64)
        self.cols = np.array([s[1] for s in slots], dtype=np.int64)
        self.bs = np.array([s[2] for s in slots], dtype=np.int64)
        matched = [gts[s[3]] for s in slots]
        self.gts = matched
        self.raw = t[self.rows, self.cols, self.bs] if slots else np.zeros((0, layout.channels))
        self.pw = np.array([anchors[b].pw for b in self.bs])
        self.ph = np.array([anchors[b].ph for b in self.bs])
        self.prior = np.array([anchors[b].theta_prior for b in self.bs])
        side = layout.image_side
        stride = layout.stride
        self.gx = np.array([g.cx / stride for g in matched]) - self.cols
        self.gy = np.array([g.cy / stride for g in matched]) - self.rows
        self.gw = np.array([g.w / side for g in matched])
        self.gh = np.array([g.h / side for g in matched])
        self.gtheta = np.array([g.theta for g in matched])
        if np.any((self.gx <= 0) | (self.gx >= 1) | (self.gy <= 0) | (self.gy >= 1)):
            raise ValueError("ground-truth centers must lie strictly inside their responsible cells")

    def index(self):
        return self.rows, self.cols, self.bs


def _check_sizes(w, h):
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError("predicted and target sizes must be positive")


def _reg(sl: _Slots):
    r = sl.raw
    sx, sy = _sigmoid(r[:, 0]), _sigmoid(r[:, 1])
    wn = sl.pw * np.exp(r[:, 2]) / sl.layout.image_side
    hn = sl.ph * np.exp(r[:, 3]) / sl.layout.image_side
    _check_sizes(wn, hn)
    _check_sizes(sl.gw, sl.gh)
    dw = np.sqrt(wn) - np.sqrt(sl.gw)
    dh = np.sqrt(hn) - np.sqrt(sl.gh)
    value = float(np.sum(bce(sx, sl.gx) + bce(sy, sl.gy) + dw**2 + dh**2)) if len(r) else 0.0
    g = np.zeros_like(r)
    g[:, 0] = bce_grad(sx, sl.gx) * sx * (1.0 - sx)
    g[:, 1] = bce_grad(sy, sl.gy) * sy * (1.0 - sy)
    # d sqrt(p e^t) / dt = sqrt(p e^t) / 2
    g[:, 2] = dw * np.sqrt(wn)
    g[:, 3] = dh * np.sqrt(hn)
    return value, g


def angle_to_unit(theta):
    """Map an angle in (-pi/2, pi/2] to (0, 1]."""
    return np.asarray(theta) / math.pi + 0.5


def _angle(sl: _Slots):
    r = sl.raw
    theta = normalize_angles(sl.prior + np.arctan(r[:, 4])) if len(r) else np.zeros(0)
    ap, at = angle_to_unit(theta), angle_to_unit(sl.gtheta)
    value = float(np.sum(bce(ap, at))) if len(r) else 0.0
    g = np.zeros_like(r)
    g[:, 4] = bce_grad(ap, at) / (math.pi * (1.0 + r[:, 4] ** 2))
    return value, g


def decoded_slots(sl: _Slots) -> np.ndarray:
    r = sl.raw
    cx = (_sigmoid(r[:, 0]) + sl.cols) * sl.layout.stride
    cy = (_sigmoid(r[:, 1]) + sl.rows) * sl.layout.stride
    w = sl.pw * np.exp(r[:, 2])
    h = sl.ph * np.exp(r[:, 3])
    theta = normalize_angles(sl.prior + np.arctan(r[:, 4])) if len(r) else np.zeros(0)
    return np.column_stack([cx, cy, w, h, theta])


def confidence_targets(tensor, gts, assignment, anchors, layout) -> np.ndarray:
    """IoU of each responsible slot's decoded box with its ground truth, in slot order.

    The decoded box uses the ground truth's outline (ellipse or rectangle).
    """
    sl = _Slots(tensor, gts, assignment, anchors, layout)
    if not sl.gts:
        return np.zeros(0)
    pred = decoded_slots(sl)
    out = np.empty(len(sl.gts))
    for k, gt in enumerate(sl.gts):
        outline = Category.ELLIPSE if gt.category.elliptic else Category.RECTANGLE
        out[k] = iou_matrix(pred[k : k + 1], [outline], [gt.as_tuple()], [gt.category])[0, 0]
    return out


def _obj_noobj(t, sl: _Slots, assignment: Assignment, targets):
    conf = _sigmoid(t[..., 5])
    g_obj = np.zeros_like(t)
    g_noobj = np.zeros_like(t)
    idx = sl.index()
    c_resp = conf[idx]
    obj = float(np.sum(bce(c_resp, targets))) if len(c_resp) else 0.0
    g_obj[idx + (5,)] = bce_grad(c_resp, targets) * c_resp * (1.0 - c_resp)
    mask = assignment.noobj_mask
    c_bg = conf[mask]
    noobj = float(np.sum(bce(c_bg, 0.0))) if c_bg.size else 0.0
    g5 = np.zeros(conf.shape)
    g5[mask] = bce_grad(c_bg, 0.0) * c_bg * (1.0 - c_bg)
    g_noobj[..., 5] = g5
    return obj, noobj, g_obj, g_noobj


def loss_and_grad(
    tensor: np.ndarray,
    gts: Sequence[RotatedPrimitive],
    assignment: Assignment,
    anchors: Sequence[Anchor],
    layout: HeadLayout,
    weights: LossWeights = LossWeights(),
    obj_targets: np.ndarray | None = None,
) -> tuple[LossBreakdown, np.ndarray]:
    """Weighted loss and its gradient w.r.t. every tensor entry.

    `obj_targets` overrides the IoU confidence targets (slot order as in
    `Assignment.slots`).
    """
    sl = _Slots(tensor, gts, assignment, anchors, layout)
    if obj_targets is None:
        obj_targets = confidence_targets(tensor, gts, assignment, anchors, layout)
    obj_targets = np.asarray(obj_targets, dtype=np.float64)
    reg, g_reg = _reg(sl)
    ang, g_ang = _angle(sl)
    obj, noobj, g_obj, g_noobj = _obj_noobj(sl.t, sl, assignment, obj_targets)
    total = weights.reg * reg + weights.angle * ang + weights.obj * obj + weights.noobj * noobj
    grad = weights.obj * g_obj + weights.noobj * g_noobj
    idx = sl.index()
    if len(idx[0]):
        # slots are unique so fancy-index accumulation is safe
        grad[idx] += weights.reg * g_reg + weights.angle * g_ang
    return LossBreakdown(reg, ang, obj, noobj, total), grad


def reg_loss(tensor, gts, assignment, anchors, layout) -> float:
    """Center cross-entropy plus square-root size error over responsible slots."""
    return _reg(_Slots(tensor, gts, assignment, anchors, layout))[0]


def angle_loss(tensor, gts, assignment, anchors, layout) -> float:
    return _angle(_Slots(tensor, gts, assignment, anchors, layout))[0]


def obj_noobj_loss(tensor, gts, assignment, anchors, layout, obj_targets=None) -> tuple[float, float]:
    sl = _Slots(tensor, gts, assignment, anchors, layout)
    if obj_targets is None:
        obj_targets = confidence_targets(tensor, gts, assignment, anchors, layout)
    obj, noobj, _, _ = _obj_noobj(sl.t, sl, assignment, np.asarray(obj_targets, dtype=np.float64))
    return obj, noobj


def total_loss(tensor, gts, assignment, anchors, layout, weights: LossWeights = LossWeights(), obj_targets=None) -> LossBreakdown:
    return loss_and_grad(tensor, gts, assignment, anchors, layout, weights, obj_targets)[0]


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    max_rel_error: float

    def report(self) -> str:
        worst = int(np.argmax(self.rel_error)) if self.rel_error.size else 0
        return (
            f"parameters {self.rel_error.size}\n"
            f"max_rel_error {self.max_rel_error:.9g}\n"
            f"worst_index {worst}\n"
        )


def grad_check(
    loss_at: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point: np.ndarray,
    step: float = 1e-5,
    floor: float = 1e-6,
    indices: np.ndarray | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    `loss_at(x)` returns (value, gradient). Relative error is
    |a - n| / max(|a|, |n|, floor); `floor` keeps near-zero components from
    dividing by rounding noise. `indices` restricts the check to those flat
    entries; the report arrays then follow that order.
    """
    x = np.array(point, dtype=np.float64)
    value, analytic = loss_at(x)
    if not math.isfinite(value):
        raise ValueError("loss is not finite at the check point")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64)
    analytic = analytic[idx]
    nflat = np.empty(idx.size)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        fp = loss_at(x)[0]
        flat[i] = orig - step
        fm = loss_at(x)[0]
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"loss is not finite within {step} of parameter {i}")
        nflat[n] = (fp - fm) / (2.0 * step)
    numeric = nflat
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(analytic, numeric, rel, float(rel.max()) if rel.size else 0.0)


def tensor_loss_fn(gts, assignment, anchors, layout, weights: LossWeights = LossWeights(), obj_targets=None):
    """`loss_at` closure over a raw tensor, with confidence targets frozen at first use."""
    frozen = {"targets": obj_targets}

    def loss_at(x):
        t = x.reshape(layout.shape)
        if frozen["targets"] is None:
            frozen["targets"] = confidence_targets(t, gts, assignment, anchors, layout)
        br, g = loss_and_grad(t, gts, assignment, anchors, layout, weights, frozen["targets"])
        return br.total, g

    return loss_at


@dataclass
class LossProblem:
    tensor: np.ndarray
    gts: list[RotatedPrimitive]
    assignment: Assignment
    anchors: list[Anchor]
    layout: HeadLayout


def random_problem(
    rng: np.random.Generator,
    S: int = 4,
    B: int = 3,
    C: int = 4,
    stride: float = 32.0,
    max_objects: int = 4,
    logit_range: float = 3.0,
    angle_offset: float = 0.2,
) -> LossProblem:
    """Random tensor and ground truths for gradient checks.

    Logits stay within +-`logit_range` so no BCE clamp is active, and angle
    offsets stay within +-`angle_offset` so decoded angles never reach the
    +-pi/2 wrap. Each object gets its own cell.
    """
    if math.atan(angle_offset) >= math.pi / (2 * B):
        raise ValueError(f"angle_offset {angle_offset} can reach the wrap with {B} priors")
    layout = HeadLayout(S, B, C, stride)
    anchors = [
        Anchor(float(rng.uniform(0.5, 3.0) * stride), float(rng.uniform(0.5, 3.0) * stride), float(pr))
        for pr in angle_priors(B)
    ]
    n = int(rng.integers(1, min(max_objects, S * S) + 1))
    cells = rng.choice(S * S, size=n, replace=False)
    gts = []
    for c in cells:
        row, col = divmod(int(c), S)
        cat = Category(int(rng.integers(C)))
        w = float(rng.uniform(0.3, 4.0) * stride)
        h = w if cat.symmetric else float(rng.uniform(0.3, 1.0)) * w
        theta = 0.0 if cat == Category.CIRCLE else float(rng.uniform(-math.pi / 2, math.pi / 2))
        cx = (col + float(rng.uniform(0.05, 0.95))) * stride
        cy = (row + float(rng.uniform(0.05, 0.95))) * stride
        gts.append(RotatedPrimitive(cat, cx, cy, w, h, theta if theta > -math.pi / 2 else math.pi / 2))
    tensor = rng.uniform(-logit_range, logit_range, layout.shape)
    tensor[..., 4] = rng.uniform(-angle_offset, angle_offset, layout.shape[:3])
    return LossProblem(tensor, gts, assign_targets(gts, anchors, layout), anchors, layout)
