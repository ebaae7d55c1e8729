"""Single-pass inference: centers, offset-guided part lookup, dynamic masks, matrix NMS, MIR rescoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, Thresholds
from .network import HeadOutputs, SMPNet, dynamic_mask, image_to_tensor, resize
from .synthdata import HumanInstance, ParsingScene, PartInstance
from .targets import round_half_up


@dataclass
class PartRecord:
    category: int
    location: tuple[int, int]
    level: int
    part_score: float
    soft_mask: np.ndarray            # (H/4, W/4)
    binary_mask: np.ndarray          # (H, W) bool
    final_category: int
    fused_score: float
    soft_full: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class ParsedHuman:
    center_cell: tuple[int, int]
    center_score: float
    parts: list[PartRecord]
    score: float = 0.0

    @property
    def union_mask(self) -> np.ndarray:
        out = np.zeros_like(self.parts[0].binary_mask)
        for p in self.parts:
            out |= p.binary_mask
        return out

    def to_instance(self) -> HumanInstance:
        """Scene-schema human; pixels claimed by several parts go to the highest soft value."""
        masks = np.stack([p.binary_mask for p in self.parts])
        softs = np.stack([p.soft_full if p.soft_full is not None else p.binary_mask.astype(float)
                          for p in self.parts])
        winner = np.argmax(np.where(masks, softs, -np.inf), axis=0)
        out = []
        for k, p in enumerate(self.parts):
            m = masks[k] & (winner == k)
            if m.any():
                out.append(PartInstance(p.final_category, m, score=float(p.fused_score)))
        return HumanInstance(out, score=float(self.score))


def extract_centers(heat, threshold: float) -> list[tuple[tuple[int, int], float]]:
    """Local maxima of an (S, S) heatmap at or above ``threshold``.

    Among 8-adjacent maxima (plateaus) only the first in row-major order is
    kept. Result is sorted by descending score, row-major among equal scores.
    """
    h = torch.as_tensor(heat, dtype=torch.float64).reshape(-1, *np.shape(heat)[-2:])[0]
    pooled = F.max_pool2d(h[None, None], 3, stride=1, padding=1)[0, 0]
    cand = (h == pooled) & (h >= threshold)
    hv = h.numpy()
    kept: list[tuple[int, int]] = []
    for j, i in zip(*np.nonzero(cand.numpy())):
        if any(abs(i - ki) <= 1 and abs(j - kj) <= 1 for ki, kj in kept):
            continue
        kept.append((int(i), int(j)))
    out = [((i, j), float(hv[j, i])) for i, j in kept]
    out.sort(key=lambda t: -t[1])
    return out


def resize_levels(maps: Sequence[torch.Tensor], size: int) -> torch.Tensor:
    """Per-level (1, C, S_l, S_l) maps -> (L, C, S, S), bilinear."""
    return torch.cat([resize(m, size) for m in maps], dim=0)


def decode_parts(cell: tuple[int, int], offset: np.ndarray, part_rs: np.ndarray,
                 kernel_rs: np.ndarray, threshold: float) -> list[dict]:
    """Part lookups for one center.

    offset: (C_P, 2, S, S); part_rs: (L, C_P, S, S); kernel_rs: (L, C_K, S, S),
    all already on the human grid. Returns dicts with category, location,
    level, score and kernel.
    """
    i, j = cell
    S = offset.shape[-1]
    records = []
    for p in range(offset.shape[0]):
        ti = min(max(round_half_up(i + float(offset[p, 0, j, i])), 0), S - 1)
        tj = min(max(round_half_up(j + float(offset[p, 1, j, i])), 0), S - 1)
        conf = part_rs[:, p, tj, ti]
        lv = int(np.argmax(conf))
        score = float(conf[lv])
        if score >= threshold:
            records.append({"category": p, "location": (ti, tj), "level": lv, "score": score,
                            "kernel": kernel_rs[lv, :, tj, ti]})
    return records


def mask_iou_matrix(masks: np.ndarray) -> np.ndarray:
    m = masks.reshape(masks.shape[0], -1).astype(np.float64)
    inter = m @ m.T
    area = m.sum(axis=1)
    union = area[:, None] + area[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def matrix_nms(masks: np.ndarray, scores: Sequence[float], sigma: float = 2.0,
               threshold: float = 0.1) -> tuple[list[int], list[float]]:
    """Gaussian matrix NMS over binary masks given in descending-score order.

    Returns the indices of surviving candidates and their decayed scores,
    sorted by decayed score (stable).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0:
        return [], []
    if np.any(np.diff(scores) > 0):
        raise ValueError("matrix_nms expects candidates sorted by descending score")
    iou = np.triu(mask_iou_matrix(masks), k=1)
    comp = iou.max(axis=0)                      # largest overlap with any higher-scored mask
    ratio = np.exp(-(iou ** 2) / sigma) / np.exp(-(comp[:, None] ** 2) / sigma)
    decay = np.ones(n)
    for jx in range(1, n):
        decay[jx] = ratio[:jx, jx].min()
    new = scores * decay
    order = [k for k in np.argsort(-new, kind="stable") if new[k] >= threshold]
    return [int(k) for k in order], [float(new[k]) for k in order]


def resolve_categories(probs: np.ndarray) -> list[int]:
    """Distinct category per row, assigned greedily by descending confidence."""
    n, c = probs.shape
    taken: set[int] = set()
    out = [0] * n
    for r in sorted(range(n), key=lambda r: -probs[r].max()):
        for cat in np.argsort(-probs[r], kind="stable"):
            if int(cat) not in taken:
                out[r] = int(cat)
                taken.add(int(cat))
                break
    return out


def decode_outputs(out: HeadOutputs, image_shape: tuple[int, int], thresholds: Thresholds = Thresholds(),
                   nms_sigma: float = 2.0, mir: Optional[torch.nn.Module] = None) -> list[ParsedHuman]:
    """Decode batch element 0 of ``out`` into humans.

    With ``mir`` (an MIR module) and ``out.mir_feat`` present, parts are
    reclassified; masks are unaffected.
    """
    H, W = image_shape
    S = out.center.shape[-1]
    with torch.no_grad():
        centers = extract_centers(out.center[0, 0], thresholds.center)
        if not centers:
            return []
        offset = out.offset[0].numpy()
        part_rs = resize_levels([p[:1] for p in out.part], S).numpy()
        kernel_rs = resize_levels([k[:1] for k in out.kernel], S)
        mask_feat = out.mask_feat[0]

        humans = []
        for cell, cscore in centers:
            recs = decode_parts(cell, offset, part_rs, kernel_rs.numpy(), thresholds.part)
            if not recs:
                continue
            kern = torch.stack([torch.as_tensor(r["kernel"], dtype=mask_feat.dtype) for r in recs])
            soft = dynamic_mask(kern, mask_feat)
            full = F.interpolate(soft[:, None], size=(H, W), mode="bilinear", align_corners=False)[:, 0]
            binary = (full > thresholds.mask_bin).numpy()
            soft_np, full_np = soft.numpy(), full.numpy()
            parts = []
            for k, r in enumerate(recs):
                if not binary[k].any():
                    continue
                parts.append(PartRecord(r["category"], r["location"], r["level"], r["score"],
                                        soft_np[k], binary[k], r["category"], r["score"], full_np[k]))
            if parts:
                humans.append(ParsedHuman(cell, cscore, parts, cscore))
        if not humans:
            return []

        keep, new_scores = matrix_nms(np.stack([h.union_mask for h in humans]),
                                      [h.center_score for h in humans], nms_sigma, thresholds.nms)
        humans = [humans[k] for k in keep]
        for h, s in zip(humans, new_scores):
            h.score = s

        if mir is not None and out.mir_feat is not None:
            feat = out.mir_feat[0]
            for h in humans:
                masks = torch.as_tensor(np.stack([p.binary_mask for p in h.parts]))
                probs = torch.softmax(mir.classify(feat, masks), dim=1).double().numpy()
                for p, cat, pr in zip(h.parts, resolve_categories(probs), probs):
                    p.final_category = cat
                    p.fused_score = math.sqrt(p.part_score * float(pr[cat]))
    return humans


def parse_image(image: np.ndarray, model: SMPNet, use_mir: Optional[bool] = None) -> list[ParsedHuman]:
    """Parse one uint8 (H, W, 3) image with exactly one network forward pass."""
    cfg: ModelConfig = model.cfg
    use_mir = cfg.mir.enabled if use_mir is None else use_mir
    H, W = image.shape[:2]
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(image_to_tensor(image, dtype), with_mir=use_mir)
    return decode_outputs(out, (H, W), cfg.thresholds, cfg.nms_sigma, model.mir if use_mir else None)


def humans_to_scene(humans: Sequence[ParsedHuman], image: np.ndarray, scene_id: str,
                    num_part_classes: int) -> ParsingScene:
    insts = [h.to_instance() for h in humans]
    return ParsingScene(image=image, humans=[h for h in insts if h.parts], id=scene_id,
                        num_part_classes=num_part_classes)
