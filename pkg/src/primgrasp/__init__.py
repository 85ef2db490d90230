"""Rotated ellipse/rectangle detection geometry and depth-based grasp synthesis."""

from .primitives import (
    Anchor,
    Category,
    GridCell,
    HeadLayout,
    RawPrediction,
    RotatedPrimitive,
    decode,
    encode,
    normalize_angle,
)
from .overlap import rotated_iou

__version__ = "0.1.0"

__all__ = [
    "Anchor",
    "Category",
    "GridCell",
    "HeadLayout",
    "RawPrediction",
    "RotatedPrimitive",
    "decode",
    "encode",
    "normalize_angle",
    "rotated_iou",
]
