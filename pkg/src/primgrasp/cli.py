"""Command-line entry point: file-driven wrappers around the library.

Exit codes: 0 success, 1 validation error (bad flags or input files),
2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .anchors import ClusterConfig, assign_targets, build_rotated_anchors, cluster_dims, read_anchors, write_anchors
from .evalkit import match_detections, metrics_report
from .grasp import (
    DEFAULT_MATCH_RADIUS,
    DEFAULT_MIN_PRESENCE,
    WorkspaceConfig,
    aggregate_detections,
    grasp_from_detection,
    read_extrinsics,
    read_intrinsics,
    write_grasps,
)
from .loss import LossWeights, grad_check, loss_and_grad, random_problem, tensor_loss_fn
from .netpbm import read_pgm, read_ppm, write_ppm
from .pipeline import PipelineConfig, detections_from_tensor, run_pipeline, suppress
from .primitives import Category, read_labels
from .suppression import DEFAULT_IOU_THRESHOLD, read_detections, write_detections
from .synth import BACKGROUNDS, SceneSpec, draw_outlines, read_manifest, write_dataset
from .tensorfile import read_tensor

log = logging.getLogger("primgrasp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; that code is reserved for internal errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fraction(name):
    def parse(text):
        v = float(text)
        if not 0.0 <= v <= 1.0:
            raise argparse.ArgumentTypeError(f"{name} must be in [0, 1], got {v}")
        return v

    return parse


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _existing(text):
    p = Path(text)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"no such file: {p}")
    return p


def _pair(kind):
    def parse(text):
        parts = text.split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
        lo, hi = (kind(p) for p in parts)
        return lo, hi

    return parse


def _categories(text):
    names = {c.name.lower(): c for c in Category}
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if tok in names:
            out.append(names[tok])
        elif tok.isdigit() and int(tok) < len(Category):
            out.append(Category(int(tok)))
        else:
            raise argparse.ArgumentTypeError(f"unknown category {tok!r}")
    return tuple(out)


def _add_spec_flags(p):
    g = p.add_argument_group("scene")
    g.add_argument("--width", type=int, default=416)
    g.add_argument("--height", type=int, default=416)
    g.add_argument("--object-count", type=_pair(int), default=(1, 6), metavar="LO,HI")
    g.add_argument("--size-range", type=_pair(float), default=(24.0, 96.0), metavar="LO,HI")
    g.add_argument("--categories", type=_categories, default=tuple(Category),
                   help="comma-separated names or ids (default: all)")
    g.add_argument("--max-pairwise-iou", type=_fraction("max-pairwise-iou"), default=0.3)
    g.add_argument("--max-occlusion", type=_fraction("max-occlusion"), default=0.04)
    g.add_argument("--background", choices=BACKGROUNDS, default="gradient")
    g.add_argument("--noise-sigma", type=float, default=4.0)
    g.add_argument("--no-depth", action="store_true")


def _spec_from(args, seed) -> SceneSpec:
    return SceneSpec(
        width=args.width, height=args.height, object_count=args.object_count, categories=args.categories,
        size_range=args.size_range, max_pairwise_iou=args.max_pairwise_iou, max_occlusion=args.max_occlusion,
        background=args.background, noise_sigma=args.noise_sigma, seed=seed, with_depth=not args.no_depth,
    )


def _add_workspace_flags(p):
    g = p.add_argument_group("workspace")
    g.add_argument("--max-reach", type=float, default=0.85, help="meters from the robot base")
    g.add_argument("--min-z", type=float, default=0.01)
    g.add_argument("--max-z", type=float, default=0.6)
    g.add_argument("--max-aperture", type=float, default=0.155, help="gripper opening in meters")


def _workspace_from(args) -> WorkspaceConfig:
    return WorkspaceConfig(args.max_reach, args.min_z, args.max_z, args.max_aperture)


def _write_overlay(path, image_path, dets, size):
    if image_path is not None:
        img = read_ppm(image_path)
    else:
        img = np.zeros((size, size, 3), dtype=np.uint8)
    write_ppm(path, draw_outlines(img, [d.primitive for d in dets]))


# --- subcommands


def cmd_synth(args):
    spec = _spec_from(args, args.seed)
    manifest = write_dataset(spec, args.count, args.out, seed=args.seed)
    print(f"wrote {args.count} scenes, manifest {manifest}")


def cmd_anchors(args):
    labels = []
    for d in read_manifest(args.manifest):
        labels += read_labels(Path(d) / "labels.txt")
    centroids = cluster_dims(labels, ClusterConfig(K=args.k, seed=args.seed, max_iter=args.max_iter))
    anchors = build_rotated_anchors(centroids, args.angle_count)
    write_anchors(args.output, anchors, args.k, args.angle_count, args.seed)
    print(f"wrote {len(anchors)} anchors to {args.output}")


def cmd_decode(args):
    tensor, layout = read_tensor(args.tensor)
    anchors, _ = read_anchors(args.anchors)
    dets = detections_from_tensor(tensor, layout, anchors, args.score_threshold)
    write_detections(args.output, dets)
    if args.overlay:
        _write_overlay(args.overlay, args.image, dets, int(round(layout.image_side)))
    print(f"{len(dets)} detections")


def cmd_nms(args):
    dets = read_detections(args.detections)
    kept = suppress(dets, args.iou_threshold, not args.class_agnostic, not args.no_prefilter)
    write_detections(args.output, kept)
    if args.overlay:
        if args.image is None and args.size is None:
            raise UsageError("--overlay needs --image or --size")
        _write_overlay(args.overlay, args.image, kept, args.size)
    print(f"kept {len(kept)} of {len(dets)}")


def _loss_inputs(args):
    tensor, layout = read_tensor(args.tensor)
    anchors, _ = read_anchors(args.anchors)
    gts = read_labels(args.labels)
    return tensor, gts, assign_targets(gts, anchors, layout), anchors, layout


def _weights(args) -> LossWeights:
    return LossWeights(args.w_reg, args.w_angle, args.w_obj, args.w_noobj)


def cmd_loss(args):
    tensor, gts, asg, anchors, layout = _loss_inputs(args)
    breakdown, _ = loss_and_grad(tensor, gts, asg, anchors, layout, _weights(args))
    text = breakdown.report()
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)


def cmd_gradcheck(args):
    weights = _weights(args)
    if args.random:
        rng = np.random.default_rng(args.seed)
        worst = 0.0
        lines = []
        for i in range(args.random):
            pb = random_problem(rng)
            r = grad_check(tensor_loss_fn(pb.gts, pb.assignment, pb.anchors, pb.layout, weights), pb.tensor, args.step)
            worst = max(worst, r.max_rel_error)
            lines.append(f"config {i} max_rel_error {r.max_rel_error:.9g}\n")
        text = "".join(lines) + f"configs {args.random}\nmax_rel_error {worst:.9g}\n"
    else:
        if not (args.tensor and args.labels and args.anchors):
            raise UsageError("gradcheck needs --random N or all of --tensor, --labels, --anchors")
        tensor, gts, asg, anchors, layout = _loss_inputs(args)
        idx = None
        if args.entries:
            rng = np.random.default_rng(args.seed)
            idx = np.sort(rng.choice(tensor.size, size=min(args.entries, tensor.size), replace=False))
        r = grad_check(tensor_loss_fn(gts, asg, anchors, layout, weights), tensor, args.step, indices=idx)
        text = r.report()
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)


def cmd_eval(args):
    if len(args.detections) != len(args.labels):
        raise UsageError(f"--detections has {len(args.detections)} files but --labels has {len(args.labels)}")
    pairs = sorted(zip(args.detections, args.labels), key=lambda p: str(p[0]))
    per_scene = [
        (Path(d).stem, match_detections(read_detections(d), read_labels(g), args.iou_threshold))
        for d, g in pairs
    ]
    text = metrics_report(per_scene, args.iou_threshold)
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text.splitlines()[-1] + "\n")


def cmd_grasp(args):
    frames = [read_detections(p) for p in args.detections]
    depth = read_pgm(args.depth)
    if depth.dtype != np.uint16:
        raise UsageError(f"{args.depth}: depth must be a 16-bit PGM in millimeters")
    k = read_intrinsics(args.intrinsics)
    e = read_extrinsics(args.extrinsics)
    ws = _workspace_from(args)
    tracks = aggregate_detections(frames, args.match_radius, args.min_presence)
    poses = [grasp_from_detection(d.primitive, depth, k, e, ws, args.window) for d in tracks]
    write_grasps(args.output, poses)
    print(f"{len(poses)} grasps, {sum(p.reachable for p in poses)} reachable")


def cmd_pipeline(args):
    cfg = PipelineConfig(
        out_dir=args.out, seed=args.seed, count=args.count, stride=args.stride, K=args.k,
        angle_count=args.angle_count, score_threshold=args.score_threshold, iou_threshold=args.iou_threshold,
        eval_iou=args.eval_iou, class_aware=not args.class_agnostic, frame_count=args.frame_count,
        spec=_spec_from(args, args.seed), workspace=_workspace_from(args),
    )
    result = run_pipeline(cfg)
    sys.stdout.write(result.metrics_path.read_text().splitlines()[-1] + "\n")


def _add_loss_flags(p, required):
    p.add_argument("--tensor", type=_existing, required=required)
    p.add_argument("--labels", type=_existing, required=required)
    p.add_argument("--anchors", type=_existing, required=required)
    p.add_argument("--w-reg", type=float, default=1.0)
    p.add_argument("--w-angle", type=float, default=1.0)
    p.add_argument("--w-obj", type=float, default=1.0)
    p.add_argument("--w-noobj", type=float, default=0.5)
    p.add_argument("--output", type=Path)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="primgrasp", description="Rotated primitive detection and grasp synthesis tools.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate labeled synthetic scenes")
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("scenes"))
    _add_spec_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("anchors", help="cluster label sizes into rotated anchors")
    p.add_argument("--manifest", type=_existing, required=True)
    p.add_argument("--k", type=_positive_int, default=6)
    p.add_argument("--angle-count", type=_positive_int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=_positive_int, default=300)
    p.add_argument("--output", type=Path, required=True)
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("decode", help="decode a raw-prediction tensor file into detections")
    p.add_argument("--tensor", type=_existing, required=True)
    p.add_argument("--anchors", type=_existing, required=True)
    p.add_argument("--score-threshold", type=_fraction("score-threshold"), default=0.5)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--overlay", type=Path, help="write a PPM with detections painted")
    p.add_argument("--image", type=_existing, help="PPM to paint the overlay on")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("nms", help="rotated non-maximum suppression")
    p.add_argument("--detections", type=_existing, required=True)
    p.add_argument("--iou-threshold", type=_fraction("iou-threshold"), default=DEFAULT_IOU_THRESHOLD)
    p.add_argument("--class-agnostic", action="store_true")
    p.add_argument("--no-prefilter", action="store_true")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--overlay", type=Path)
    p.add_argument("--image", type=_existing)
    p.add_argument("--size", type=_positive_int, help="blank overlay side when no --image")
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("loss", help="loss breakdown for a tensor against labels")
    _add_loss_flags(p, True)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference loss gradients")
    _add_loss_flags(p, False)
    p.add_argument("--random", type=_positive_int, help="check N random configurations instead of files")
    p.add_argument("--entries", type=_positive_int, help="check a random subset of tensor entries")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="precision/recall of detections against labels")
    p.add_argument("--detections", type=_existing, nargs="+", required=True)
    p.add_argument("--labels", type=_existing, nargs="+", required=True)
    p.add_argument("--iou-threshold", type=_fraction("iou-threshold"), default=0.5)
    p.add_argument("--output", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grasp", help="grasp poses from a burst of detection frames")
    p.add_argument("--detections", type=_existing, nargs="+", required=True, help="one file per frame")
    p.add_argument("--depth", type=_existing, required=True)
    p.add_argument("--intrinsics", type=_existing, required=True)
    p.add_argument("--extrinsics", type=_existing, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--match-radius", type=float, default=DEFAULT_MATCH_RADIUS)
    p.add_argument("--min-presence", type=_fraction("min-presence"), default=DEFAULT_MIN_PRESENCE)
    p.add_argument("--window", type=_positive_int, default=5)
    _add_workspace_flags(p)
    p.set_defaults(func=cmd_grasp)

    p = sub.add_parser("pipeline", help="synth, oracle tensors, decode, nms, eval and grasp in one run")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--count", type=_positive_int, default=50)
    p.add_argument("--out", type=Path, default=Path("pipeline_out"))
    p.add_argument("--stride", type=float, default=32.0)
    p.add_argument("--k", type=_positive_int, default=6)
    p.add_argument("--angle-count", type=_positive_int, default=6)
    p.add_argument("--score-threshold", type=_fraction("score-threshold"), default=0.5)
    p.add_argument("--iou-threshold", type=_fraction("iou-threshold"), default=DEFAULT_IOU_THRESHOLD)
    p.add_argument("--eval-iou", type=_fraction("eval-iou"), default=0.5)
    p.add_argument("--class-agnostic", action="store_true")
    p.add_argument("--frame-count", type=_positive_int, default=10)
    _add_spec_flags(p)
    _add_workspace_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help and flag errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, ValueError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
