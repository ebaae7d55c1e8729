"""Optimization loop, MIR fine-tuning stage, checkpoints and the JSONL training log.

Log records (one JSON object per line)::

    {"iter": 1, "epoch": 1, "lr": 0.02, "center": ..., "part": ..., "dice": ...,
     "offset": ..., "total": ..., "counts": {...}}

MIR records carry ``"stage": "mir"`` and ``"mir_epoch"`` instead of ``"iter"``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import Config, ModelConfig, TrainConfig
from .decode import parse_image
from .losses import LossReport, focal_loss, total_loss
from .metrics import _mask_iou
from .network import (SMPNet, image_to_tensor, load_arrays, save_arrays, state_arrays,
                      load_state_arrays)
from .synthdata import HumanInstance, ParsingScene, PartInstance
from .targets import TargetSet, assign_targets

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Total loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class MIRHarvestError(RuntimeError):
    pass


def set_deterministic(seed: int, threads: int = 1) -> None:
    """Single-threaded strict-determinism mode."""
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate during 1-based ``epoch``: divided by 10 from each decay epoch on."""
    drops = sum(1 for d in cfg.lr_decay_epochs if epoch >= d)
    return cfg.base_lr / 10 ** drops


@dataclass
class TrainState:
    model: SMPNet
    optimizer: torch.optim.Optimizer
    config: Config
    iteration: int = 0
    lr: float = 0.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    perm: Optional[np.ndarray] = None
    history: list[dict] = field(default_factory=list)

    @property
    def rng_state(self) -> dict:
        return self.rng.bit_generator.state


def make_optimizer(model: SMPNet, cfg: TrainConfig) -> torch.optim.SGD:
    params = [p for n, p in model.named_parameters() if not n.startswith("mir.")]
    return torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def init_state(cfg: Config) -> TrainState:
    torch.manual_seed(cfg.train.seed)
    model = SMPNet(cfg.model, cfg.grid)
    opt = make_optimizer(model, cfg.train)
    return TrainState(model, opt, cfg, rng=np.random.default_rng(cfg.train.seed))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(state: TrainState, path) -> Path:
    from .config import config_to_dict
    arrays = {f"params/{k}": v for k, v in state_arrays(state.model).items()}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                arrays[f"momentum/{names[id(p)]}"] = buf.detach().numpy().copy()
    if state.perm is not None:
        arrays["perm"] = np.asarray(state.perm, dtype=np.int64)
    arrays["torch_rng"] = torch.get_rng_state().numpy().copy()
    manifest = {
        "kind": "smp-train-state",
        "config": config_to_dict(state.config),
        "iteration": state.iteration,
        "lr": state.lr,
        "rng_state": state.rng_state,
    }
    return save_arrays(path, arrays, manifest)


def load_checkpoint(path, cfg: Optional[Config] = None) -> TrainState:
    """Restore a training state; ``cfg`` overrides the embedded config (model must agree)."""
    from .config import config_from_dict
    arrays, manifest = load_arrays(path)
    stored = config_from_dict(manifest["config"])
    cfg = cfg or stored
    if cfg.model != stored.model:
        raise ValueError(f"{path}: checkpoint model config differs from the requested one")
    model = SMPNet(cfg.model, cfg.grid)
    load_state_arrays(model, {k[7:]: v for k, v in arrays.items() if k.startswith("params/")})
    opt = make_optimizer(model, cfg.train)
    params = dict(model.named_parameters())
    for k, v in arrays.items():
        if k.startswith("momentum/"):
            opt.state[params[k[9:]]]["momentum_buffer"] = torch.from_numpy(np.array(v))
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest.get("rng_state", rng.bit_generator.state)
    if "torch_rng" in arrays:
        torch.set_rng_state(torch.from_numpy(np.array(arrays["torch_rng"])))
    return TrainState(model, opt, cfg, iteration=int(manifest.get("iteration", 0)),
                      lr=float(manifest.get("lr", cfg.train.base_lr)), rng=rng,
                      perm=arrays.get("perm"))


# ---------------------------------------------------------------- data

def _jitter(scene: ParsingScene, size: int) -> ParsingScene:
    img = np.asarray(Image.fromarray(scene.image).resize((size, size), Image.BILINEAR))
    humans = []
    for h in scene.humans:
        parts = []
        for p in h.parts:
            m = np.asarray(Image.fromarray(p.mask.astype(np.uint8) * 255).resize((size, size), Image.NEAREST)) > 127
            if m.any():
                parts.append(PartInstance(p.category, m))
        if parts:
            humans.append(HumanInstance(parts))
    return ParsingScene(img, humans, scene.id, scene.num_part_classes)


class SceneBatcher:
    """Epoch-wise shuffled batches; target sets are cached unless scales are jittered."""

    def __init__(self, scenes: Sequence[ParsingScene], cfg: Config):
        if not scenes:
            raise ValueError("training needs a nonempty dataset")
        self.scenes = list(scenes)
        self.cfg = cfg
        self._targets: dict[int, TargetSet] = {}

    @property
    def iters_per_epoch(self) -> int:
        return math.ceil(len(self.scenes) / self.cfg.train.batch_size)

    def targets(self, k: int) -> TargetSet:
        if k not in self._targets:
            self._targets[k] = assign_targets(self.scenes[k], self.cfg.grid, self.cfg.model.epsilon)
        return self._targets[k]

    def batch(self, indices, rng: np.random.Generator):
        jitter = self.cfg.train.scale_jitter_range
        if jitter is None:
            scenes = [self.scenes[k] for k in indices]
            targets = [self.targets(k) for k in indices]
        else:
            lo, hi = jitter
            size = 32 * int(rng.integers(math.ceil(lo / 32), hi // 32 + 1))
            scenes = [_jitter(self.scenes[k], size) for k in indices]
            targets = [assign_targets(s, self.cfg.grid, self.cfg.model.epsilon) for s in scenes]
        images = image_to_tensor(np.stack([s.image for s in scenes]))
        return images, targets


# ---------------------------------------------------------------- training

def train(scenes: Sequence[ParsingScene], cfg: Config, out_dir=None, state: Optional[TrainState] = None,
          log_path=None, max_iters: Optional[int] = None,
          callback: Optional[Callable[[TrainState, LossReport], None]] = None) -> TrainState:
    """Momentum-SGD training of the base network on ``scenes``.

    Runs until ``max_iters`` (argument, else ``cfg.train.max_iters``, else
    ``epochs`` worth of iterations). Passing ``state`` resumes from it.
    """
    tc = cfg.train
    batcher = SceneBatcher(scenes, cfg)
    ipe = batcher.iters_per_epoch
    if state is None:
        state = init_state(cfg)
    total_iters = max_iters or tc.max_iters or tc.epochs * ipe
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    if log_path is None and out_dir:
        log_path = out_dir / "train_log.jsonl"
    log_fh = open(log_path, "a" if state.iteration else "w") if log_path else None
    model, opt = state.model, state.optimizer
    model.train()
    try:
        while state.iteration < total_iters:
            it = state.iteration
            epoch = it // ipe + 1
            pos = it % ipe
            if pos == 0 or state.perm is None:
                state.perm = state.rng.permutation(len(batcher.scenes))
            bs = tc.batch_size
            idx = state.perm[pos * bs:(pos + 1) * bs]
            lr = lr_at_epoch(epoch, tc)
            if tc.warmup_iters and it < tc.warmup_iters:
                lr *= (it + 1) / tc.warmup_iters
            for g in opt.param_groups:
                g["lr"] = lr
            images, targets = batcher.batch(idx, state.rng)
            out = model(images)
            rep = total_loss(out, targets, cfg.model.loss_weights, cfg.model.focal)
            if not torch.isfinite(rep.total):
                ckpt = save_checkpoint(state, out_dir / "last_good.npz") if out_dir else None
                raise TrainingDiverged(f"non-finite loss at iteration {it + 1}", ckpt)
            opt.zero_grad(set_to_none=True)
            rep.total.backward()
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            state.iteration = it + 1
            state.lr = lr
            record = {"iter": state.iteration, "epoch": epoch, "lr": lr, **rep.summary()}
            state.history.append(record)
            if log_fh and (state.iteration % tc.log_every == 0 or state.iteration == total_iters):
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if callback:
                callback(state, rep)
            if out_dir and tc.checkpoint_every and state.iteration % tc.checkpoint_every == 0:
                save_checkpoint(state, out_dir / "latest.npz")
    except KeyboardInterrupt:
        if out_dir:
            save_checkpoint(state, out_dir / "latest.npz")
        raise
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        save_checkpoint(state, out_dir / "latest.npz")
    return state


# ---------------------------------------------------------------- MIR stage

@dataclass
class MIRSample:
    image_index: int
    masks: torch.Tensor        # (n, H, W) bool
    labels: torch.Tensor       # (n,) long


def semantic_grid(scene: ParsingScene, size: int) -> np.ndarray:
    """(size, size) labels sampled at cell centers: 0 background, c + 1 for category c."""
    H, W = scene.shape
    ys = ((np.arange(size) + 0.5) * H / size).astype(int)
    xs = ((np.arange(size) + 0.5) * W / size).astype(int)
    lab = np.zeros((H, W), dtype=np.int64)
    for h in scene.humans:
        for p in h.parts:
            lab[p.mask] = p.category + 1
    return lab[np.ix_(ys, xs)]


def harvest_mir_samples(model: SMPNet, scenes: Sequence[ParsingScene], min_iou: float = 0.5) -> list[MIRSample]:
    """Decoded part masks paired with the category of the best-overlapping GT part."""
    samples = []
    for k, scene in enumerate(scenes):
        gt_parts = [p for h in scene.humans for p in h.parts]
        masks, labels = [], []
        for human in parse_image(scene.image, model, use_mir=False):
            for rec in human.parts:
                ious = [_mask_iou(rec.binary_mask, g.mask) for g in gt_parts]
                if ious and max(ious) >= min_iou:
                    masks.append(rec.binary_mask)
                    labels.append(gt_parts[int(np.argmax(ious))].category)
        if masks:
            samples.append(MIRSample(k, torch.from_numpy(np.stack(masks)), torch.tensor(labels)))
    return samples


def train_mir(model: SMPNet, scenes: Sequence[ParsingScene], cfg: Optional[Config] = None,
              log_path=None) -> SMPNet:
    """Train the MIR head on top of a frozen base network; returns the model with MIR enabled."""
    cfg = cfg or Config(model=model.cfg, grid=model.grid_spec)
    mc = cfg.model.mir
    samples = harvest_mir_samples(model, scenes)
    if not samples:
        raise MIRHarvestError("no decoded parts overlap the ground truth; train the base network first")
    for n, p in model.named_parameters():
        p.requires_grad_(n.startswith("mir."))
    model.eval()
    with torch.no_grad():
        fused = {}
        for s in samples:
            img = image_to_tensor(scenes[s.image_index].image)
            stages, levels = model.backbone_fpn(img)
            fused[s.image_index] = model.fusion["mix"](levels, model.grid_spec.human_grid)
    S = model.grid_spec.human_grid
    sem = {s.image_index: torch.from_numpy(semantic_grid(scenes[s.image_index], S)) for s in samples}
    opt = torch.optim.Adam(model.mir.parameters(), lr=mc.lr)
    C = cfg.model.num_part_classes
    items = [(k, m) for k, s in enumerate(samples) for m in range(len(s.labels))]
    fh = open(log_path, "a") if log_path else None
    rng = np.random.default_rng(cfg.train.seed)
    total_steps = mc.epochs * math.ceil(len(items) / mc.batch_size)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 0.5 * (1 + math.cos(math.pi * k / total_steps)))
    model.mir.train()
    try:
        for epoch in range(1, mc.epochs + 1):
            tot = {"cls": 0.0, "aux": 0.0}
            perm = rng.permutation(len(items))
            steps = range(0, len(items), mc.batch_size)
            for b in steps:
                chosen = [items[k] for k in perm[b:b + mc.batch_size]]
                cls = aux_loss = 0.0
                for k in sorted({k for k, _ in chosen}):
                    s = samples[k]
                    rows = torch.tensor([m for kk, m in chosen if kk == k])
                    feat, aux = model.mir.features(fused[s.image_index])
                    logits = model.mir.classify(feat[0], s.masks[rows])
                    onehot = F.one_hot(s.labels[rows], C).to(logits.dtype)
                    cls = cls + focal_loss(torch.sigmoid(logits), onehot, cfg.model.focal.alpha,
                                           cfg.model.focal.gamma) * len(rows) / len(chosen)
                    aux_loss = aux_loss + F.cross_entropy(aux, sem[s.image_index][None]) * len(rows) / len(chosen)
                loss = cls + mc.aux_weight * aux_loss
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                sched.step()
                tot["cls"] += float(cls.detach()) / len(steps)
                tot["aux"] += float(aux_loss.detach()) / len(steps)
            rec = {"stage": "mir", "mir_epoch": epoch, "cls": tot["cls"], "aux": tot["aux"],
                   "samples": len(items)}
            log.info("mir epoch %d: %s", epoch, rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    new_cfg = dataclasses.replace(model.cfg, mir=dataclasses.replace(model.cfg.mir, enabled=True))
    model.cfg = new_cfg
    return model


def part_accuracy(model: SMPNet, scenes: Sequence[ParsingScene], use_mir: bool,
                  min_iou: float = 0.5) -> tuple[float, int]:
    """Fraction of decoded parts (IoU >= ``min_iou`` with some GT part) labelled with that part's category."""
    correct = total = 0
    for scene in scenes:
        gt_parts = [p for h in scene.humans for p in h.parts]
        for human in parse_image(scene.image, model, use_mir=use_mir):
            for rec in human.parts:
                ious = [_mask_iou(rec.binary_mask, g.mask) for g in gt_parts]
                if ious and max(ious) >= min_iou:
                    total += 1
                    correct += rec.final_category == gt_parts[int(np.argmax(ious))].category
    return (correct / total if total else 0.0), total
