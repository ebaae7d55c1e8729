"""Command-line entry point: synth, train, train-mir, eval, infer, overlay, bench.

Exit codes:
    0  success
    1  runtime failure (bad input file, checkpoint mismatch, failed assertion)
    2  usage error (bad flags, missing data or config)
    3  training diverged; the last good checkpoint is kept in the output directory
    130  interrupted; a resumable checkpoint was written first
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import synthdata as sd
from .config import Config, ConfigError, load_config
from .decode import decode_outputs, humans_to_scene
from .metrics import align_scenes, evaluate
from .network import image_to_tensor, load_model, save_model

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED, EXIT_INTERRUPTED = 0, 1, 2, 3, 130

log = logging.getLogger("smparse")


class UsageError(Exception):
    pass


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2))


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{what} directory not found: {path}")
    return path


def _load_cfg(path: Optional[str]) -> Config:
    if path is not None and not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def _with_seed(cfg: Config, seed: Optional[int]) -> Config:
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))


def read_predictions(root) -> list[sd.ParsingScene]:
    """Prediction scenes under ``root``: a dataset index if present, else every scene subdirectory."""
    root = Path(root)
    if (root / "index.json").is_file():
        return sd.read_dataset(root)
    return [sd.read_scene(p) for p in sorted(root.iterdir()) if (p / "scene.json").is_file()]


def write_predictions(scenes: Sequence[sd.ParsingScene], root) -> Path:
    """Write or extend a prediction dataset; scenes with an existing id are replaced."""
    root = Path(root)
    ids = []
    if (root / "index.json").is_file():
        ids = json.loads((root / "index.json").read_text())["scenes"]
    for s in scenes:
        sd.write_scene(s, root / s.id)
        if s.id not in ids:
            ids.append(s.id)
    num_classes = scenes[0].num_part_classes if scenes else None
    index = {"format": sd.FORMAT_VERSION, "num_part_classes": num_classes, "scenes": ids}
    (root / "index.json").write_text(json.dumps(index, indent=2))
    return root


def _load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


# ---------------------------------------------------------------- synth

def _scene_job(args):
    seed, spec, sid = args
    return sd.generate_scene(seed, spec, sid)


def cmd_synth(a) -> int:
    out = Path(a.out)
    if out.exists() and any(out.iterdir()):
        if not a.force:
            raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    confusable = tuple(tuple(int(c) for c in pair.split(",")) for pair in a.confusable)
    spec = sd.SceneSpec(num_humans=tuple(a.humans), human_scale=tuple(a.scale), num_part_classes=a.parts,
                        height=a.size, width=a.size, occlusion=a.occlusion, confusable=confusable)
    jobs = [(s, spec, f"scene_{k:04d}") for k, s in enumerate(sd.scene_seeds(a.scenes, a.seed))]
    if a.workers > 1:
        with ProcessPoolExecutor(a.workers) as pool:
            scenes = list(pool.map(_scene_job, jobs))
    else:
        scenes = [_scene_job(j) for j in jobs]
    sd.write_dataset(scenes, out)
    _emit({"out": str(out), "scenes": len(scenes), "seed": a.seed, "num_part_classes": a.parts,
           "humans": sum(len(s.humans) for s in scenes), "parts": sum(len(h.parts) for s in scenes for h in s.humans),
           "occlusion": a.occlusion})
    return EXIT_OK


# ---------------------------------------------------------------- train

def cmd_train(a) -> int:
    from .plotting import plot_losses
    from .trainer import TrainingDiverged, load_checkpoint, set_deterministic, train
    data = _require_dir(a.data, "data")
    cfg = _with_seed(_load_cfg(a.config), a.seed)
    scenes = sd.read_dataset(data)
    out = Path(a.out)
    set_deterministic(cfg.train.seed)
    state = None
    if a.resume:
        ckpt = Path(a.resume) if a.resume != "auto" else out / "latest.npz"
        if not ckpt.is_file():
            raise UsageError(f"no checkpoint to resume from: {ckpt}")
        state = load_checkpoint(ckpt, cfg)
        log.info("resuming from %s at iteration %d", ckpt, state.iteration)
    try:
        state = train(scenes, cfg, out_dir=out, state=state, max_iters=a.max_iters,
                      callback=_progress(cfg.train.log_every))
    except TrainingDiverged as e:
        log.error("%s; last good checkpoint: %s", e, e.checkpoint)
        return EXIT_DIVERGED
    except KeyboardInterrupt:
        log.error("interrupted; resume with --resume auto")
        return EXIT_INTERRUPTED
    save_model(state.model, out / "model.npz")
    plot_losses(state.history, out / "loss.png")
    _emit({"out": str(out), "iterations": state.iteration, "final": state.history[-1] if state.history else None})
    return EXIT_OK


def _progress(every: int):
    def cb(state, rep):
        if state.iteration % max(every, 1) == 0:
            log.info("iter %d lr %.4g total %.4f", state.iteration, state.lr, float(rep.total.detach()))
    return cb


def cmd_train_mir(a) -> int:
    from .trainer import MIRHarvestError, part_accuracy, set_deterministic, train_mir
    data = _require_dir(a.data, "data")
    if not Path(a.ckpt).is_file():
        raise UsageError(f"checkpoint not found: {a.ckpt}")
    model = load_model(a.ckpt)
    cfg = _with_seed(_load_cfg(a.config) if a.config else Config(model=model.cfg, grid=model.grid_spec), a.seed)
    cfg = dataclasses.replace(cfg, model=dataclasses.replace(model.cfg, mir=cfg.model.mir))
    if a.epochs is not None:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(
            cfg.model, mir=dataclasses.replace(cfg.model.mir, epochs=a.epochs)))
    set_deterministic(cfg.train.seed)
    scenes = sd.read_dataset(data)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model = train_mir(model, scenes, cfg, log_path=out / "mir_log.jsonl")
    except MIRHarvestError as e:
        log.error("%s", e)
        return EXIT_FAIL
    save_model(model, out / "model_mir.npz")
    base, n = part_accuracy(model, scenes, use_mir=False)
    mir, _ = part_accuracy(model, scenes, use_mir=True)
    _emit({"out": str(out / "model_mir.npz"), "epochs": cfg.model.mir.epochs, "parts": n,
           "accuracy_base": base, "accuracy_mir": mir})
    return EXIT_OK


# ---------------------------------------------------------------- eval / infer / overlay

def cmd_eval(a) -> int:
    from .plotting import plot_ap_curve
    gts = sd.read_dataset(_require_dir(a.gt, "ground-truth"))
    preds = align_scenes(read_predictions(_require_dir(a.pred, "prediction")), gts)
    metrics = evaluate(preds, gts)
    if a.plot:
        plot_ap_curve(metrics, a.plot)
    if a.out:
        Path(a.out).write_text(json.dumps(metrics, indent=2))
    _emit(metrics)
    return EXIT_OK


def _infer_inputs(path: Path) -> list[tuple[str, np.ndarray]]:
    if path.is_dir():
        if (path / "index.json").is_file():
            return [(s.id, s.image) for s in sd.read_dataset(path)]
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        return [(p.stem, _load_image(p)) for p in files]
    return [(path.stem, _load_image(path))]


def _check_classes(model, parts: Optional[int]) -> None:
    if parts is not None and parts != model.cfg.num_part_classes:
        raise ValueError(f"checkpoint has {model.cfg.num_part_classes} part classes, --parts says {parts}")


def cmd_infer(a) -> int:
    from .decode import parse_image
    if not Path(a.ckpt).is_file():
        raise UsageError(f"checkpoint not found: {a.ckpt}")
    expect = _load_cfg(a.config).model if a.config else None
    model = load_model(a.ckpt, expect=expect)
    _check_classes(model, a.parts)
    path = Path(a.image)
    if not path.exists():
        raise UsageError(f"image not found: {path}")
    C = model.cfg.num_part_classes
    scenes = [humans_to_scene(parse_image(img, model, use_mir=a.mir), img, sid, C)
              for sid, img in _infer_inputs(path)]
    write_predictions(scenes, a.out)
    _emit({"out": str(a.out), "images": len(scenes), "humans": [len(s.humans) for s in scenes]})
    return EXIT_OK


def cmd_overlay(a) -> int:
    from .overlay import render_overlay
    image = _load_image(a.image)
    pred_dir = _require_dir(a.pred, "prediction")
    if (pred_dir / "scene.json").is_file():
        pred = sd.read_scene(pred_dir)
    else:
        scenes = {s.id: s for s in read_predictions(pred_dir)}
        stem = Path(a.image).stem
        if stem not in scenes and len(scenes) != 1:
            raise UsageError(f"no prediction for {stem!r} in {pred_dir}")
        pred = scenes.get(stem) or next(iter(scenes.values()))
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_overlay(image, pred, a.alpha)).save(out)
    _emit({"out": str(out), "humans": len(pred.humans), "size": list(image.shape[:2])})
    return EXIT_OK


# ---------------------------------------------------------------- bench

def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "p50": float(np.percentile(v, 50)), "p95": float(np.percentile(v, 95))}


def run_bench(model, datasets: Sequence[Sequence[sd.ParsingScene]], repeat: int, warmup: int = 1) -> dict:
    """Per-image forward and decode timings for one or more datasets.

    Images of the datasets are visited in interleaved order (first image of
    each dataset, then the second, ...), so slow drift of the machine affects
    every dataset alike. The forward counter must equal images x runs.
    """
    import torch
    model.eval()
    use_mir = model.cfg.mir.enabled
    mir = model.mir if use_mir else None
    cfg = model.cfg
    order = [(d, k) for k in range(max(len(ds) for ds in datasets))
             for d, ds in enumerate(datasets) if k < len(ds)]
    with torch.no_grad():
        for d, k in order[:warmup]:
            model(image_to_tensor(datasets[d][k].image), with_mir=use_mir)
    start = model.forward_count
    rows: list[list[dict]] = [[] for _ in datasets]
    for _ in range(repeat):
        for d, k in order:
            s = datasets[d][k]
            x = image_to_tensor(s.image)
            t0 = time.perf_counter()
            with torch.no_grad():
                out = model(x, with_mir=use_mir)
            t1 = time.perf_counter()
            humans = decode_outputs(out, s.shape, cfg.thresholds, cfg.nms_sigma, mir)
            t2 = time.perf_counter()
            rows[d].append({"id": s.id, "gt_humans": len(s.humans), "humans": len(humans),
                            "parts": sum(len(h.parts) for h in humans), "forward": t1 - t0, "post": t2 - t1})
    calls = model.forward_count - start
    if calls != repeat * len(order):
        raise AssertionError(f"{calls} forward passes for {repeat * len(order)} images")
    reports = [{"scenes": len(ds), "forward": _stats([r["forward"] for r in rs]),
                "post": _stats([r["post"] for r in rs]),
                "mean_humans": float(np.mean([r["humans"] for r in rs])), "per_scene": rs}
               for ds, rs in zip(datasets, rows)]
    return {"repeat": repeat, "forward_passes": calls, "datasets": reports}


def cmd_bench(a) -> int:
    from .plotting import plot_bench
    from .trainer import set_deterministic
    if not Path(a.ckpt).is_file():
        raise UsageError(f"checkpoint not found: {a.ckpt}")
    if a.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    set_deterministic(0, threads=a.threads)
    model = load_model(a.ckpt)
    datasets = [sd.read_dataset(_require_dir(d, "data")) for d in a.data]
    report = run_bench(model, datasets, a.repeat)
    for d, rep in zip(a.data, report["datasets"]):
        rep["data"] = str(d)
    if len(datasets) > 1:
        base = report["datasets"][0]["forward"]["p50"]
        report["forward_p50_change"] = [r["forward"]["p50"] / base - 1 for r in report["datasets"][1:]]
    if a.plot:
        plot_bench(report, a.plot)
    if not a.per_scene:
        for rep in report["datasets"]:
            rep.pop("per_scene")
    _emit(report)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smparse", description="Single-stage multi-human parsing toolkit.",
                                epilog="exit codes: 0 ok, 1 failure, 2 usage, 3 diverged, 130 interrupted")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--parts", type=int, default=6, help="number of part categories")
    s.add_argument("--occlusion", action="store_true")
    s.add_argument("--humans", type=int, nargs=2, default=(1, 3), metavar=("MIN", "MAX"))
    s.add_argument("--scale", type=float, nargs=2, default=(64.0, 96.0), metavar=("MIN", "MAX"),
                   help="human height range in pixels")
    s.add_argument("--size", type=int, default=256, help="square image side")
    s.add_argument("--confusable", action="append", default=[], metavar="A,B",
                   help="render category B in nearly the colour of A (repeatable)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the base network")
    t.add_argument("--config", help="YAML config (default: $SMP_CONFIG or built-in defaults)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="overrides train.seed")
    t.add_argument("--max-iters", type=int)
    t.add_argument("--resume", nargs="?", const="auto",
                   help="checkpoint to resume from (default: OUT/latest.npz)")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("train-mir", help="train the MIR head on a frozen base model")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--config")
    m.add_argument("--seed", type=int)
    m.add_argument("--epochs", type=int, help="overrides model.mir.epochs")
    m.set_defaults(func=cmd_train_mir)

    e = sub.add_parser("eval", help="metrics JSON for predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--plot", help="write an AP-vs-threshold figure here")
    e.add_argument("--out", help="also write the JSON here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="parse an image, an image directory or a dataset")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--config", help="expected model config; a mismatch is an error")
    i.add_argument("--parts", type=int, help="expected number of part categories")
    mir = i.add_mutually_exclusive_group()
    mir.add_argument("--mir", dest="mir", action="store_true", default=None)
    mir.add_argument("--no-mir", dest="mir", action="store_false")
    i.set_defaults(func=cmd_infer)

    o = sub.add_parser("overlay", help="render predictions over an image")
    o.add_argument("--pred", required=True, help="prediction scene or dataset directory")
    o.add_argument("--image", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--alpha", type=float, default=0.5)
    o.set_defaults(func=cmd_overlay)

    b = sub.add_parser("bench", help="forward vs post-processing latency")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True, action="append",
                   help="dataset directory; repeat to compare datasets with interleaved timing")
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--plot")
    b.add_argument("--per-scene", action="store_true", help="include per-scene rows in the JSON")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return a.func(a)
    except UsageError as e:
        parser.error(str(e))
    except ConfigError as e:
        print(f"smparse: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (sd.SceneFormatError, ValueError, AssertionError, RuntimeError) as e:
        print(f"smparse: {e}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
