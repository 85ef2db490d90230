"""Raw-prediction tensor files, the boundary to any detection backbone.

Layout: ASCII line ``RPRT1``, ASCII line ``S B C stride``, then
S*S*B*(6+C) little-endian float32 values ordered
[row][col][anchor][tx ty tw th ta tc cat_1..cat_C].
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .anchors import assign_targets
from .primitives import Anchor, HeadLayout, RotatedPrimitive, encode

MAGIC = b"RPRT1"
BACKGROUND_LOGIT = -12.0


def write_tensor(path: str | Path, tensor: np.ndarray, layout: HeadLayout) -> None:
    t = np.asarray(tensor)
    if t.shape != layout.shape:
        raise ValueError(f"tensor shape {t.shape} does not match layout {layout.shape}")
    header = f"{layout.S} {layout.B} {layout.C} {layout.stride:g}\n".encode()
    Path(path).write_bytes(MAGIC + b"\n" + header + t.astype("<f4").tobytes())


def read_tensor(path: str | Path) -> tuple[np.ndarray, HeadLayout]:
    data = Path(path).read_bytes()
    first = data.find(b"\n")
    if first < 0 or data[:first] != MAGIC:
        raise ValueError(f"{path}: byte 0: missing {MAGIC.decode()} magic line")
    second = data.find(b"\n", first + 1)
    if second < 0:
        raise ValueError(f"{path}: byte {first + 1}: missing header line")
    fields = data[first + 1 : second].split()
    try:
        S, B, C = (int(f) for f in fields[:3])
        stride = float(fields[3])
        if len(fields) != 4:
            raise ValueError
    except (ValueError, IndexError):
        raise ValueError(f"{path}: byte {first + 1}: header must be 'S B C stride', got {data[first + 1:second]!r}") from None
    layout = HeadLayout(S, B, C, stride)
    n = S * S * B * (6 + C)
    body = data[second + 1 :]
    if len(body) != 4 * n:
        raise ValueError(f"{path}: expected {4 * n} payload bytes after byte {second + 1}, got {len(body)}")
    t = np.frombuffer(body, dtype="<f4").reshape(layout.shape).astype(np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{path}: tensor contains non-finite values")
    return t, layout


def oracle_tensor(
    gts: Sequence[RotatedPrimitive],
    anchors: Sequence[Anchor],
    layout: HeadLayout,
    score: float = 0.95,
    category_margin: float = 8.0,
) -> np.ndarray:
    """Tensor a perfect backbone would emit for these ground truths.

    Responsible slots hold the exact encoding of their ground truth; every
    other slot gets a strongly negative confidence.
    """
    t = np.zeros(layout.shape)
    t[..., 5] = BACKGROUND_LOGIT
    asg = assign_targets(gts, anchors, layout)
    for row, col, b, g in asg.slots():
        cell = layout.cell_of(gts[g].cx, gts[g].cy)
        raw = encode(gts[g], cell, anchors[b], score, layout.C, category_margin)
        t[row, col, b] = raw.as_array()
    return t
