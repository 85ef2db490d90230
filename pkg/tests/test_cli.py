from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest

from primgrasp import cli
from primgrasp.anchors import build_rotated_anchors, write_anchors
from primgrasp.evalkit import parse_metrics_summary
from primgrasp.pipeline import PipelineConfig, detections_from_tensor
from primgrasp.primitives import HeadLayout, normalize_angle, read_labels, write_labels
from primgrasp.suppression import read_detections
from primgrasp.synth import SceneSpec, generate_scene
from primgrasp.tensorfile import oracle_tensor, read_tensor, write_tensor

SMALL = ["--width", "160", "--height", "160", "--size-range", "12,48"]


def tree(root):
    return {str(f.relative_to(root)): f.read_bytes() for f in sorted(root.rglob("*")) if f.is_file()}


def test_synth_twice_byte_identical(tmp_path):
    assert cli.main(["synth", "--count", "5", "--seed", "7", "--out", str(tmp_path / "a"), *SMALL]) == 0
    assert cli.main(["synth", "--count", "5", "--seed", "7", "--out", str(tmp_path / "b"), *SMALL]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_decode_all_zero_tensor(tmp_path):
    layout = HeadLayout(4, 2, 4, 32.0)
    write_tensor(tmp_path / "z.rprt", np.zeros(layout.shape), layout)
    write_anchors(tmp_path / "a.txt", build_rotated_anchors([[30, 20]], 2), 1, 2, 0)
    out = tmp_path / "d.txt"
    rc = cli.main(["decode", "--tensor", str(tmp_path / "z.rprt"), "--anchors", str(tmp_path / "a.txt"),
                   "--score-threshold", "0.6", "--output", str(out)])
    assert rc == 0
    assert read_detections(out) == []
    # sigma(0) * 1/4 = 0.125 sits above a 0.1 threshold
    cli.main(["decode", "--tensor", str(tmp_path / "z.rprt"), "--anchors", str(tmp_path / "a.txt"),
              "--score-threshold", "0.1", "--output", str(out)])
    assert len(read_detections(out)) == layout.S**2 * layout.B


@pytest.mark.parametrize("seed", range(4))
def test_tensor_file_round_trip(tmp_path, seed):
    spec = SceneSpec()
    scene = generate_scene(spec, seed)
    anchors = build_rotated_anchors([[30, 30], [60, 30], [90, 50]], 6)
    layout = HeadLayout(13, len(anchors), 4, 32.0)
    t = oracle_tensor(scene.labels, anchors, layout)
    write_tensor(tmp_path / "t.rprt", t, layout)
    back, lay = read_tensor(tmp_path / "t.rprt")
    assert lay == layout
    dets = sorted(detections_from_tensor(back, lay, anchors, 0.5), key=lambda d: (d.primitive.cy, d.primitive.cx))
    labels = sorted(scene.labels, key=lambda p: (p.cy, p.cx))
    assert len(dets) == len(labels)
    for d, g in zip(dets, labels):
        assert d.primitive.category == g.category
        np.testing.assert_allclose(d.primitive.as_tuple()[:4], g.as_tuple()[:4], rtol=1e-6)
        assert abs(normalize_angle(d.primitive.theta - g.theta)) <= 1e-6


def test_tensor_file_errors(tmp_path):
    p = tmp_path / "t.rprt"
    p.write_bytes(b"RPRT2\n1 1 1 8\n")
    with pytest.raises(ValueError, match="magic"):
        read_tensor(p)
    p.write_bytes(b"RPRT1\n1 1 1\n")
    with pytest.raises(ValueError, match="header"):
        read_tensor(p)
    p.write_bytes(b"RPRT1\n1 1 1 8\n" + b"\0" * 27)
    with pytest.raises(ValueError, match="payload"):
        read_tensor(p)


def test_validation_errors_exit_1(tmp_path, capsys):
    assert cli.main(["decode", "--tensor", str(tmp_path / "nope"), "--anchors", "x", "--output", "y"]) == 1
    assert "--tensor" in capsys.readouterr().err
    assert cli.main(["nms", "--detections", __file__, "--iou-threshold", "1.5", "--output", "o"]) == 1
    assert "iou-threshold" in capsys.readouterr().err
    bad = tmp_path / "dets.txt"
    bad.write_text("3 1 2 3 4 0.1 0.5\n3 1 2 3 4 0.1 2.0\n")
    assert cli.main(["nms", "--detections", str(bad), "--output", str(tmp_path / "o.txt")]) == 1
    assert "dets.txt:2" in capsys.readouterr().err
    assert cli.main(["synth"]) == 1  # missing required flag


def test_internal_error_exit_2(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("invariant broken")

    monkeypatch.setattr(cli, "write_dataset", boom)
    assert cli.main(["synth", "--count", "1", "--out", str(tmp_path)]) == 2


def test_help_per_subcommand():
    for sub in ("synth", "anchors", "decode", "nms", "loss", "gradcheck", "eval", "grasp", "pipeline"):
        assert cli.main([sub, "--help"]) == 0


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "primgrasp", "synth", "--count", "1", "--out", str(tmp_path), *SMALL],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


def test_pipeline_and_downstream_subcommands(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["pipeline", "--seed", "7", "--count", "4", "--out", str(out)]) == 0
    summary = parse_metrics_summary((out / "metrics.txt").read_text())
    assert summary["precision"] == 1.0 and summary["recall"] == 1.0 and summary["scenes"] == 4
    scene = out / "scenes" / "scene_0000"
    dets, kept = tmp_path / "d.txt", tmp_path / "k.txt"
    assert cli.main(["decode", "--tensor", str(out / "tensors" / "scene_0000.rprt"), "--anchors", str(out / "anchors.txt"),
                     "--output", str(dets), "--overlay", str(tmp_path / "o.ppm"), "--image", str(scene / "image.ppm")]) == 0
    assert cli.main(["nms", "--detections", str(dets), "--output", str(kept)]) == 0
    assert read_detections(kept) == read_detections(out / "detections" / "scene_0000.txt")
    assert cli.main(["eval", "--detections", str(kept), "--labels", str(scene / "labels.txt"),
                     "--output", str(tmp_path / "m.txt")]) == 0
    assert parse_metrics_summary((tmp_path / "m.txt").read_text())["recall"] == 1.0
    grasps = tmp_path / "g.txt"
    assert cli.main(["grasp", "--detections", *[str(kept)] * 10, "--depth", str(scene / "depth.pgm"),
                     "--intrinsics", str(out / "intrinsics.txt"), "--extrinsics", str(out / "extrinsics.txt"),
                     "--output", str(grasps)]) == 0
    assert grasps.read_text() == (out / "grasps" / "scene_0000.txt").read_text()
    assert len(grasps.read_text().splitlines()) == len(read_labels(scene / "labels.txt"))
    capsys.readouterr()
    assert cli.main(["loss", "--tensor", str(out / "tensors" / "scene_0000.rprt"), "--anchors", str(out / "anchors.txt"),
                     "--labels", str(scene / "labels.txt")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in lines] == ["reg", "angle", "obj", "noobj", "total"]


def test_pipeline_rerun_identical(tmp_path):
    args = ["pipeline", "--seed", "3", "--count", "2", *SMALL]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b")]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_gradcheck_random(capsys):
    assert cli.main(["gradcheck", "--random", "2", "--seed", "1"]) == 0
    last = capsys.readouterr().out.splitlines()[-1]
    assert last.startswith("max_rel_error") and float(last.split()[1]) <= 1e-4
    assert cli.main(["gradcheck"]) == 1


def test_eval_mismatched_lists(tmp_path):
    f = tmp_path / "l.txt"
    write_labels(f, [])
    assert cli.main(["eval", "--detections", str(f), str(f), "--labels", str(f)]) == 1


def test_pipeline_config_validation(tmp_path):
    with pytest.raises(ValueError):
        PipelineConfig(tmp_path, score_threshold=1.2)
