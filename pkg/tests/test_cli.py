import csv
import json

import numpy as np
import pytest

from beamsplat.cli import ABLATIONS, RunManifest, apply_ablations, main
from beamsplat.rangeview import load_rangeimage
from beamsplat.train import TrainConfig

SMALL = "iterations = 8\ninit_anchors = 400\nmax_anchors = 800\ndensify_from = 4\ndensify_interval = 4\n"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    assert main(["synth", "--out", str(ds), "--frames", "6", "--val", "1", "--beams", "16"]) == 0
    cfg = root / "small.txt"
    cfg.write_text(SMALL)
    run = root / "run"
    assert main(["train", str(ds), "--out", str(run), "--config", str(cfg)]) == 0
    return root


def _losses(path):
    with open(path) as f:
        return [(r["iteration"], r["total"], r["depth"], r["intensity"]) for r in csv.DictReader(f)]


def test_synth_outputs(work):
    man = RunManifest.read(work / "ds" / "manifest.json")
    assert man.status == "ok" and man.extra["frames"] == 6 and man.extra["val"] == 1
    assert man.extra["spec"]["beams"] == 16
    assert len(list((work / "ds" / "frames").glob("*.rv"))) == 6


def test_train_outputs(work):
    run = work / "run"
    man = RunManifest.read(run / "manifest.json")
    assert man.status == "ok" and man.command == "train"
    assert man.ablations == {a: False for a in ABLATIONS}
    assert TrainConfig.from_text((run / "config.txt").read_text()).iterations == 8
    assert len(_losses(run / "curves.csv")) == 8
    assert (run / "checkpoint.npz").exists()


def test_train_ablation_recorded(work):
    out = work / "abl"
    assert main(["train", str(work / "ds"), "--out", str(out), "--config", str(work / "small.txt"), "--iterations", "2", "--pseudo-plane"]) == 0
    man = RunManifest.read(out / "manifest.json")
    assert man.ablations["pseudo_plane"] is True
    assert "projection = pseudo" in man.config_text


def test_render_and_eval(work, capsys):
    out = work / "render"
    assert main(["render", str(work / "run" / "checkpoint.npz"), "--out", str(out), "--dataset", str(work / "ds"), "--frames", "0", "3", "--png"]) == 0
    for f in (0, 3):
        img = load_rangeimage(out / f"{f:04d}.rv")
        assert img.spec.shape == (16, 256)
        assert (out / f"{f:04d}.ply").exists() and (out / f"{f:04d}.png").exists()
    rep = work / "eval.json"
    assert main(["eval", str(out), str(work / "ds"), "--json", str(rep)]) == 0
    data = json.loads(rep.read_text())
    assert set(data["frames"]) == {"0", "3"}
    assert 0 <= data["mean"]["fscore"] <= 1
    assert "Point" in capsys.readouterr().out


def test_render_beam_override(work):
    out = work / "render8"
    assert main(["render", str(work / "run" / "checkpoint.npz"), "--out", str(out), "--dataset", str(work / "ds"), "--frames", "1", "--beams", "8", "--shift-z", "1.0"]) == 0
    img = load_rangeimage(out / "0001.rv")
    assert img.spec.shape == (8, 256)
    man = RunManifest.read(out / "manifest.json")
    assert man.extra["shift"] == [0.0, 0.0, 1.0]


def test_eval_missing_frames(work, capsys):
    assert main(["eval", str(work / "render"), str(work / "ds"), "--frames", "0", "5"]) == 2
    assert "missing frames: [5]" in capsys.readouterr().err


def test_invalid_inputs(work, tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("iterations = 5\nfoo\n")
    assert main(["train", str(work / "ds"), "--out", str(tmp_path / "x"), "--config", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err
    assert main(["train", str(tmp_path / "nope"), "--out", str(tmp_path / "y")]) == 2
    assert main(["render", str(work / "run" / "checkpoint.npz"), "--out", str(tmp_path / "z")]) == 2
    scene = tmp_path / "scene.json"
    scene.write_text('{"primitives": [\n{"type": "cone"}\n]}')
    assert main(["synth", "--out", str(tmp_path / "s"), "--scene", str(scene)]) == 2


def test_diverged_exit_code(work, tmp_path):
    cfg = tmp_path / "div.txt"
    cfg.write_text(SMALL + "diverge_factor = 1e-9\ndiverge_patience = 2\n")
    out = tmp_path / "div"
    assert main(["train", str(work / "ds"), "--out", str(out), "--config", str(cfg)]) == 3
    man = RunManifest.read(out / "manifest.json")
    assert man.status == "diverged" and "iteration 2" in man.extra["error"]


def test_deterministic_reruns_match(work, tmp_path):
    out = tmp_path / "again"
    assert main(["train", str(work / "ds"), "--out", str(out), "--config", str(work / "small.txt")]) == 0
    assert _losses(out / "curves.csv") == _losses(work / "run" / "curves.csv")
    a = np.load(work / "run" / "checkpoint.npz")
    b = np.load(out / "checkpoint.npz")
    for k in a.files:
        if a[k].dtype != object:
            assert np.array_equal(a[k], b[k]), k


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--coords", "2"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_apply_ablations():
    cfg = apply_ablations(TrainConfig(), {a: True for a in ABLATIONS})
    assert (cfg.projection, cfg.aabb, cfg.w_scale, cfg.w_alpha, cfg.view_inputs) == ("pseudo", "radius", 0.0, 0.0, False)
