"""End-to-end run on synthetic scenes: synth, oracle tensors, decode, NMS, eval, grasp."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .anchors import ClusterConfig, build_rotated_anchors, cluster_dims, write_anchors
from .evalkit import MatchResult, match_detections, metrics_report
from .grasp import (
    CameraIntrinsics,
    Extrinsics,
    WorkspaceConfig,
    aggregate_detections,
    grasp_from_detection,
    write_extrinsics,
    write_grasps,
    write_intrinsics,
)
from .primitives import Anchor, Category, HeadLayout, RotatedPrimitive, decode_tensor
from .suppression import ScoredDetection, rnms_arrays, write_detections
from .synth import SceneSpec, read_manifest, read_scene, write_dataset
from .tensorfile import oracle_tensor, read_tensor, write_tensor

log = logging.getLogger(__name__)


def detections_from_tensor(
    tensor: np.ndarray,
    layout: HeadLayout,
    anchors: Sequence[Anchor],
    score_threshold: float = 0.5,
) -> list[ScoredDetection]:
    """Decode every slot and keep those scoring at least `score_threshold`.

    Source indices are flat slot indices in [row][col][anchor] order.
    """
    params, cats, scores = decode_tensor(tensor, layout, anchors)
    keep = np.flatnonzero(scores >= score_threshold)
    return [
        ScoredDetection(RotatedPrimitive(Category(int(cats[i])), *params[i]), float(scores[i]), int(i))
        for i in keep
    ]


def suppress(dets: Sequence[ScoredDetection], iou_threshold: float = 0.5, class_aware: bool = True,
             prefilter: bool = True) -> list[ScoredDetection]:
    if not dets:
        return []
    keep = rnms_arrays(
        np.array([d.primitive.as_tuple() for d in dets]),
        np.array([int(d.primitive.category) for d in dets]),
        np.array([d.score for d in dets]),
        iou_threshold, class_aware, prefilter,
        np.array([d.source_index for d in dets]),
    )
    return [dets[i] for i in keep]


def default_calibration(width: int, height: int) -> tuple[CameraIntrinsics, Extrinsics]:
    """Downward-looking camera 0.7 m above the robot base, offset 0.4 m along x."""
    k = CameraIntrinsics(500.0, 500.0, width / 2, height / 2)
    e = Extrinsics(np.diag([1.0, -1.0, -1.0]), np.array([0.4, 0.0, 0.7]))
    return k, e


@dataclass
class PipelineConfig:
    out_dir: Path
    seed: int = 7
    count: int = 50
    stride: float = 32.0
    K: int = 6
    angle_count: int = 6
    score_threshold: float = 0.5
    iou_threshold: float = 0.5
    eval_iou: float = 0.5
    class_aware: bool = True
    frame_count: int = 10
    spec: SceneSpec = field(default_factory=SceneSpec)
    workspace: WorkspaceConfig = field(default_factory=WorkspaceConfig)

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        for name in ("score_threshold", "iou_threshold", "eval_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.count < 1 or self.frame_count < 1:
            raise ValueError("count and frame_count must be >= 1")


@dataclass
class PipelineResult:
    per_scene: list[tuple[str, MatchResult]]
    metrics_path: Path
    grasp_counts: dict[str, int]

    @property
    def totals(self) -> MatchResult:
        return MatchResult(
            sum(r.true_positives for _, r in self.per_scene),
            sum(r.false_positives for _, r in self.per_scene),
            sum(r.false_negatives for _, r in self.per_scene),
        )


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    out = cfg.out_dir
    manifest = write_dataset(cfg.spec, cfg.count, out / "scenes", seed=cfg.seed)
    scene_dirs = read_manifest(manifest)
    scenes = [(d.name, read_scene(d)) for d in scene_dirs]

    labels = [p for _, s in scenes for p in s.labels]
    distinct = len({(p.w, p.h) for p in labels})
    k = min(cfg.K, distinct)
    centroids = cluster_dims(labels, ClusterConfig(K=k, seed=cfg.seed))
    anchors = build_rotated_anchors(centroids, cfg.angle_count)
    write_anchors(out / "anchors.txt", anchors, k, cfg.angle_count, cfg.seed)

    side = max(cfg.spec.width, cfg.spec.height)
    layout = HeadLayout(int(math.ceil(side / cfg.stride)), len(anchors), len(Category), cfg.stride)
    intr, extr = default_calibration(cfg.spec.width, cfg.spec.height)
    write_intrinsics(out / "intrinsics.txt", intr)
    write_extrinsics(out / "extrinsics.txt", extr)

    for sub in ("tensors", "detections", "grasps"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    per_scene, grasp_counts = [], {}
    for name, scene in scenes:
        tpath = out / "tensors" / f"{name}.rprt"
        write_tensor(tpath, oracle_tensor(scene.labels, anchors, layout), layout)
        tensor, lay = read_tensor(tpath)
        dets = detections_from_tensor(tensor, lay, anchors, cfg.score_threshold)
        kept = suppress(dets, cfg.iou_threshold, cfg.class_aware)
        write_detections(out / "detections" / f"{name}.txt", kept)
        per_scene.append((name, match_detections(kept, scene.labels, cfg.eval_iou)))
        log.info("%s: %d decoded, %d after nms, %d labels", name, len(dets), len(kept), len(scene.labels))
        # static scene: every frame of the burst sees the same detections
        consensus = aggregate_detections([kept] * cfg.frame_count)
        poses = [grasp_from_detection(d.primitive, scene.depth, intr, extr, cfg.workspace) for d in consensus]
        write_grasps(out / "grasps" / f"{name}.txt", poses)
        grasp_counts[name] = sum(p.reachable for p in poses)
    metrics_path = out / "metrics.txt"
    metrics_path.write_text(metrics_report(per_scene, cfg.eval_iou))
    return PipelineResult(per_scene, metrics_path, grasp_counts)
