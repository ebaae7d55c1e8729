"""Training losses: focal (heatmaps), scale-weighted Smooth-L1 (offsets), Dice (masks)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import FocalParams, LossWeights
from .network import HeadOutputs, dynamic_mask
from .targets import TargetSet

PROB_CLAMP = 1e-7
DICE_EPS = 1e-6


def focal_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float = 0.25,
               gamma: float = 2.0) -> torch.Tensor:
    """Binary focal loss on probabilities, normalized by max(1, #positives)."""
    if pred.shape != target.shape:
        raise ValueError(f"focal_loss shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    t = target.to(p.dtype)
    pos = -alpha * (1 - p) ** gamma * torch.log(p) * t
    neg = -(1 - alpha) * p ** gamma * torch.log(1 - p) * (1 - t)
    return (pos + neg).sum() / t.sum().clamp(min=1.0)


def smooth_l1(x: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax ** 2 / beta, ax - 0.5 * beta)


def offset_loss(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor,
                weight: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 over (dx, dy), masked and weighted per cell.

    ``pred``/``target`` are (..., 2, h, w); ``valid``/``weight`` are (..., h, w).
    """
    if pred.shape != target.shape:
        raise ValueError(f"offset_loss shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    w = valid.to(pred.dtype) * weight.to(pred.dtype)
    per_cell = smooth_l1(pred - target.to(pred.dtype)).sum(dim=-3)
    return (per_cell * w).sum() / w.sum().clamp(min=1.0)


def dice_terms(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample Dice loss for (n, h, w) stacks (or a single (h, w) pair)."""
    if pred.shape != target.shape:
        raise ValueError(f"dice_loss shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    single = pred.dim() == 2
    p = pred.reshape(1 if single else pred.shape[0], -1)
    g = target.to(pred.dtype).reshape(p.shape)
    if (g.sum(dim=1) == 0).any():
        raise ValueError("dice_loss target mask is empty")
    num = 2 * (p * g).sum(dim=1)
    den = (p * p).sum(dim=1) + (g * g).sum(dim=1) + DICE_EPS
    return 1 - num / den


def dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean Dice loss over the samples of an (n, h, w) stack."""
    return dice_terms(pred, target).mean()


@dataclass
class LossReport:
    center: torch.Tensor
    part: torch.Tensor
    dice: torch.Tensor
    offset: torch.Tensor
    total: torch.Tensor
    counts: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {k: float(getattr(self, k).detach()) for k in ("center", "part", "dice", "offset", "total")}
        out["counts"] = dict(self.counts)
        return out


def weighted_total(center, part, dice, offset, weights: LossWeights):
    return (weights.center * center + weights.part * part
            + weights.dice * dice + weights.offset * offset)


def _t(arr, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr), dtype=like.dtype, device=like.device)


def total_loss(out: HeadOutputs, targets: Sequence[TargetSet], weights: LossWeights = LossWeights(),
               focal: FocalParams = FocalParams()) -> LossReport:
    """Batch loss; ``targets[b]`` supervises batch element ``b`` of ``out``."""
    if len(targets) != out.center.shape[0]:
        raise ValueError(f"{len(targets)} target sets for a batch of {out.center.shape[0]}")
    ref = out.center
    center_t = _t(np.stack([t.center_pos for t in targets]), ref)[:, None]
    center = focal_loss(out.center, center_t, focal.alpha, focal.gamma)

    part_terms = []
    pos_part = 0
    for lv, pred in enumerate(out.part):
        tgt = _t(np.stack([t.part_pos[lv] for t in targets]), ref)
        pos_part += int(tgt.sum())
        part_terms.append(focal_loss(pred, tgt, focal.alpha, focal.gamma))
    part = torch.stack(part_terms).mean()

    off_t = _t(np.stack([t.offset for t in targets]), ref)
    valid = _t(np.stack([t.offset_valid for t in targets]), ref)
    wmap = _t(np.stack([t.offset_weight for t in targets]), ref)
    offset = offset_loss(out.offset, off_t, valid, wmap)

    dice_all = []
    for b, t in enumerate(targets):
        stacked = t.stacked_masks()
        if stacked is None:
            continue
        lv, ys, xs, _, masks = stacked
        kernels = torch.stack([out.kernel[int(l)][b, :, int(y), int(x)] for l, y, x in zip(lv, ys, xs)])
        soft = dynamic_mask(kernels, out.mask_feat[b])
        dice_all.append(dice_terms(soft, _t(masks, ref)))
    if dice_all:
        dice = torch.cat(dice_all).mean()
        pos_masks = sum(d.numel() for d in dice_all)
    else:
        dice = ref.new_zeros(())
        pos_masks = 0

    total = weighted_total(center, part, dice, offset, weights)
    counts = {
        "pos_center": int(center_t.sum()),
        "pos_part": pos_part,
        "pos_masks": pos_masks,
        "valid_offsets": int(valid.sum()),
    }
    return LossReport(center, part, dice, offset, total, counts)
