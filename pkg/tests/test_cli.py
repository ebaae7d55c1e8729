import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from metric_oracle import random_predictions
from smparse import cli
from smparse import synthdata as sd
from smparse.config import GridSpec, ModelConfig, dump_config, Config
from smparse.decode import decode_outputs, humans_to_scene
from smparse.metrics import evaluate
from smparse.network import SMPNet, load_arrays, save_model
from smparse.oracle import oracle_outputs
from smparse.targets import assign_targets

SUBCOMMANDS = ("synth", "train", "train-mir", "eval", "infer", "overlay", "bench")


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd):
    r = subprocess.run([sys.executable, "-m", "smparse.cli", cmd, "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "usage" in r.stdout


@pytest.fixture(scope="module")
def gt_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("gt")
    assert cli.main(["synth", "--out", str(root / "d"), "--scenes", "4", "--seed", "1", "--humans", "2", "3"]) == 0
    return root / "d"


def test_synth_layout_and_determinism(tmp_path, capsys):
    code, manifest = run(capsys, "synth", "--out", tmp_path / "a", "--scenes", 8, "--seed", 1)
    assert code == 0 and manifest["scenes"] == 8
    dirs = sorted(p.name for p in (tmp_path / "a").iterdir() if p.is_dir())
    assert len(dirs) == 8 and (tmp_path / "a" / "index.json").is_file()
    run(capsys, "synth", "--out", tmp_path / "b", "--scenes", 8, "--seed", 1)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert sd.read_dataset(tmp_path / "a") == sd.generate_dataset(8, 1)


def test_synth_workers_match_serial(tmp_path, capsys):
    run(capsys, "synth", "--out", tmp_path / "a", "--scenes", 3, "--seed", 4)
    run(capsys, "synth", "--out", tmp_path / "b", "--scenes", 3, "--seed", 4, "--workers", 2)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_synth_single_part(tmp_path, capsys):
    code, _ = run(capsys, "synth", "--out", tmp_path / "a", "--scenes", 3, "--seed", 2, "--parts", 1)
    assert code == 0
    scenes = sd.read_dataset(tmp_path / "a")
    assert all(p.category == 0 for s in scenes for h in s.humans for p in h.parts)


def test_synth_refuses_nonempty(tmp_path, capsys):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "keep.txt").write_text("hi")
    with pytest.raises(SystemExit) as e:
        cli.main(["synth", "--out", str(tmp_path / "x"), "--scenes", "1"])
    assert e.value.code == 2
    assert (tmp_path / "x" / "keep.txt").exists()
    assert cli.main(["synth", "--out", str(tmp_path / "x"), "--scenes", "1", "--force"]) == 0
    assert not (tmp_path / "x" / "keep.txt").exists()


def test_eval_perfect_and_empty(tmp_path, gt_dir, capsys):
    code, m = run(capsys, "eval", "--pred", gt_dir, "--gt", gt_dir, "--plot", tmp_path / "ap.png")
    assert code == 0
    assert (m["ap_p_50"], m["ap_p_vol"], m["pcp_50"]) == (1.0, 1.0, 1.0)
    assert (tmp_path / "ap.png").stat().st_size > 0
    (tmp_path / "empty").mkdir()
    code, m = run(capsys, "eval", "--pred", tmp_path / "empty", "--gt", gt_dir)
    assert (m["ap_p_50"], m["ap_p_vol"], m["pcp_50"]) == (0.0, 0.0, 0.0)


def test_eval_matches_metrics_module(tmp_path, capsys):
    run(capsys, "synth", "--out", tmp_path / "gt", "--scenes", 10, "--seed", 3, "--occlusion")
    gts = sd.read_dataset(tmp_path / "gt")
    rng = np.random.default_rng(0)
    preds = []
    for g in gts:
        # Label maps hold one category per pixel, so resolve part overlaps before writing.
        humans = []
        for h in random_predictions(g.humans, rng, g.shape):
            lab = h.label_map()
            parts = [sd.PartInstance(c, lab == c + 1) for c in h.categories if (lab == c + 1).any()]
            humans.append(sd.HumanInstance(parts, score=h.score))
        preds.append(sd.ParsingScene(g.image, humans, g.id, 6))
    cli.write_predictions(preds, tmp_path / "pred")
    code, m = run(capsys, "eval", "--pred", tmp_path / "pred", "--gt", tmp_path / "gt")
    assert code == 0
    assert m == json.loads(json.dumps(evaluate(preds, gts)))


def test_oracle_predictions_round_trip_through_eval(tmp_path, gt_dir, capsys):
    # The prediction writer used by infer, fed with oracle head outputs.
    gts = sd.read_dataset(gt_dir)
    preds = []
    for g in gts:
        out = oracle_outputs(g, assign_targets(g, GridSpec(), 0.2), 32)
        preds.append(humans_to_scene(decode_outputs(out, g.shape), g.image, g.id, 6))
    cli.write_predictions(preds, tmp_path / "pred")
    _, m = run(capsys, "eval", "--pred", tmp_path / "pred", "--gt", gt_dir)
    assert m["ap_p_50"] == 1.0 and m["pcp_50"] >= 0.99 and m["ap_p_vol"] >= 0.99


def test_eval_missing_dir_is_usage_error(tmp_path, gt_dir):
    with pytest.raises(SystemExit) as e:
        cli.main(["eval", "--pred", str(tmp_path / "nope"), "--gt", str(gt_dir)])
    assert e.value.code == 2


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("ck") / "model.npz"
    save_model(SMPNet(ModelConfig()), path)
    return path


def test_infer_writes_prediction_schema(tmp_path, gt_dir, ckpt, capsys):
    code, rep = run(capsys, "infer", "--ckpt", ckpt, "--image", gt_dir / "scene_0000" / "image.png",
                    "--out", tmp_path / "pred")
    assert code == 0 and rep["images"] == 1
    scenes = cli.read_predictions(tmp_path / "pred")
    assert [s.id for s in scenes] == ["image"]
    code, rep = run(capsys, "infer", "--ckpt", ckpt, "--image", gt_dir, "--out", tmp_path / "pred2")
    assert [s.id for s in cli.read_predictions(tmp_path / "pred2")] == [s.id for s in sd.read_dataset(gt_dir)]
    code, m = run(capsys, "eval", "--pred", tmp_path / "pred2", "--gt", gt_dir)
    assert code == 0 and 0.0 <= m["ap_p_50"] <= 1.0


def test_infer_class_mismatch(tmp_path, gt_dir, ckpt, capsys):
    img = gt_dir / "scene_0000" / "image.png"
    assert cli.main(["infer", "--ckpt", str(ckpt), "--image", str(img), "--out", str(tmp_path / "p"),
                     "--parts", "4"]) == 1
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(dump_config(Config(model=ModelConfig(num_part_classes=4, head_channels=48))))
    assert cli.main(["infer", "--ckpt", str(ckpt), "--image", str(img), "--out", str(tmp_path / "p"),
                     "--config", str(cfg_path)]) == 1
    assert "part" in capsys.readouterr().err.lower()


def test_overlay_dimensions_and_blank(tmp_path, gt_dir, capsys):
    img = gt_dir / "scene_0001" / "image.png"
    code, _ = run(capsys, "overlay", "--pred", gt_dir / "scene_0001", "--image", img, "--out", tmp_path / "o.png")
    assert code == 0
    src = np.array(Image.open(img))
    out = np.array(Image.open(tmp_path / "o.png"))
    assert out.shape == src.shape and not np.array_equal(out, src)
    blank = np.zeros((64, 48, 3), np.uint8)
    Image.fromarray(blank).save(tmp_path / "blank.png")
    sd.write_scene(sd.ParsingScene(blank, [], "blank", 6), tmp_path / "pb")
    run(capsys, "overlay", "--pred", tmp_path / "pb", "--image", tmp_path / "blank.png", "--out", tmp_path / "b.png")
    assert np.array_equal(np.array(Image.open(tmp_path / "b.png")), blank)


def test_bench_report(tmp_path, gt_dir, ckpt, capsys):
    code, rep = run(capsys, "bench", "--ckpt", ckpt, "--data", gt_dir, "--repeat", 3, "--plot", tmp_path / "b.png",
                    "--per-scene")
    assert code == 0
    (d,) = rep["datasets"]
    assert rep["repeat"] == 3 and rep["forward_passes"] == 3 * d["scenes"]
    assert len(d["per_scene"]) == 3 * d["scenes"]
    for key in ("forward", "post"):
        assert set(d[key]) == {"mean", "p50", "p95"}
    assert (tmp_path / "b.png").is_file()


def test_bench_two_datasets_interleaved(tmp_path, gt_dir, ckpt, capsys):
    code, rep = run(capsys, "bench", "--ckpt", ckpt, "--data", gt_dir, "--data", gt_dir, "--repeat", 1)
    assert code == 0 and len(rep["datasets"]) == 2 and len(rep["forward_p50_change"]) == 1
    assert rep["forward_passes"] == 2 * rep["datasets"][0]["scenes"]


def test_train_resume_and_seed_override(tmp_path, gt_dir, capsys):
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text("train:\n  seed: 3\n  checkpoint_every: 1\n")
    code, rep = run(capsys, "train", "--config", cfg_path, "--data", gt_dir, "--out", tmp_path / "run",
                    "--max-iters", 2, "--seed", 9)
    assert code == 0 and rep["iterations"] == 2
    _, manifest = load_arrays(tmp_path / "run" / "latest.npz")
    assert manifest["config"]["train"]["seed"] == 9
    for f in ("model.npz", "loss.png", "train_log.jsonl"):
        assert (tmp_path / "run" / f).is_file()
    code, rep = run(capsys, "train", "--config", cfg_path, "--data", gt_dir, "--out", tmp_path / "run",
                    "--max-iters", 3, "--seed", 9, "--resume")
    assert code == 0 and rep["iterations"] == 3
    lines = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x)["iter"] for x in lines] == [1, 2, 3]


def test_train_missing_inputs(tmp_path, gt_dir):
    for argv in (["--data", str(tmp_path / "none")], ["--data", str(gt_dir), "--config", str(tmp_path / "no.yaml")]):
        with pytest.raises(SystemExit) as e:
            cli.main(["train", "--out", str(tmp_path / "o"), *argv])
        assert e.value.code == 2


def test_train_mir_on_untrained_model_fails(tmp_path, gt_dir, ckpt, capsys):
    assert cli.main(["train-mir", "--ckpt", str(ckpt), "--data", str(gt_dir), "--out", str(tmp_path / "m")]) == 1
