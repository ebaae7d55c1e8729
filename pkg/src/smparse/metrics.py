"""Human-level parsing metrics: AP^p at IoU thresholds, AP^p_vol and PCP_50.

A predicted human is compared with a ground-truth human by the mean of
per-category mask IoUs over the union of their categories (a category present
on one side only scores 0). Within a scene, predictions are visited by
descending score (stable for ties) and each takes the unused ground-truth
human with the highest mean IoU (first on ties); the pair is formed only if
that IoU exceeds the threshold, otherwise the prediction is a false positive
and the ground truth stays available. Precision/recall points are taken at
each distinct score, so equal-scored predictions enter the curve together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .synthdata import HumanInstance, ParsingScene

THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def part_ious(pred: HumanInstance, gt: HumanInstance) -> dict[int, float]:
    """Per-category IoU over the union of both humans' categories."""
    cats = sorted(set(pred.categories) | set(gt.categories))
    if not cats:
        raise ValueError("both humans are empty")
    out = {}
    for c in cats:
        p, g = pred.part(c), gt.part(c)
        out[c] = 0.0 if p is None or g is None else _mask_iou(p.mask, g.mask)
    return out


def human_pair_iou(pred: HumanInstance, gt: HumanInstance) -> float:
    ious = part_ious(pred, gt)
    return float(sum(ious.values()) / len(ious))


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_preds: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)


def _score(h: HumanInstance) -> float:
    return 0.0 if h.score is None else float(h.score)


def score_order(preds: Sequence[HumanInstance]) -> list[int]:
    return sorted(range(len(preds)), key=lambda k: -_score(preds[k]))


def iou_matrix(preds: Sequence[HumanInstance], gts: Sequence[HumanInstance]) -> np.ndarray:
    m = np.zeros((len(preds), len(gts)))
    for a, p in enumerate(preds):
        for b, g in enumerate(gts):
            m[a, b] = human_pair_iou(p, g)
    return m


def greedy_match(ious: np.ndarray, order: Sequence[int], threshold: float) -> MatchResult:
    n_pred, n_gt = ious.shape
    used = np.zeros(n_gt, dtype=bool)
    res = MatchResult()
    for a in order:
        best, best_iou = -1, -1.0
        for b in range(n_gt):
            if not used[b] and ious[a, b] > best_iou:
                best, best_iou = b, ious[a, b]
        if best >= 0 and best_iou > threshold:
            used[best] = True
            res.pairs.append((a, best, float(best_iou)))
        else:
            res.unmatched_preds.append(a)
    res.unmatched_gts = [b for b in range(n_gt) if not used[b]]
    return res


def match_humans(preds: Sequence[HumanInstance], gts: Sequence[HumanInstance],
                 threshold: float) -> MatchResult:
    return greedy_match(iou_matrix(preds, gts), score_order(preds), threshold)


def average_precision(scores: Sequence[float], tp: Sequence[bool], num_gt: int) -> float:
    """All-points interpolated AP with one PR point per distinct score."""
    if num_gt <= 0:
        raise ValueError("average precision is undefined without ground truth")
    if len(scores) == 0:
        return 0.0
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(tp, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    last = np.r_[s[1:] != s[:-1], True]        # end of each equal-score group
    ctp = np.cumsum(t)[last]
    cfp = np.cumsum(1 - t)[last]
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * envelope))


class _SceneCache:
    """Pairwise IoUs of one scene, computed once and reused across thresholds."""

    def __init__(self, preds: Sequence[HumanInstance], gts: Sequence[HumanInstance]):
        self.preds, self.gts = list(preds), list(gts)
        self.part = [[part_ious(p, g) for g in self.gts] for p in self.preds]
        self.ious = np.array([[sum(d.values()) / len(d) for d in row] for row in self.part])
        self.ious = self.ious.reshape(len(self.preds), len(self.gts))
        self.order = score_order(self.preds)

    def match(self, threshold: float) -> MatchResult:
        return greedy_match(self.ious, self.order, threshold)


def _as_humans(items) -> list[list[HumanInstance]]:
    return [list(x.humans) if isinstance(x, ParsingScene) else list(x) for x in items]


def _caches(preds, gts) -> list[_SceneCache]:
    P, G = _as_humans(preds), _as_humans(gts)
    if len(P) != len(G):
        raise ValueError(f"{len(P)} prediction scenes for {len(G)} ground-truth scenes")
    if sum(len(g) for g in G) == 0:
        raise ValueError("metrics are undefined with zero ground-truth humans")
    return [_SceneCache(p, g) for p, g in zip(P, G)]


def _ap(caches: Sequence[_SceneCache], threshold: float) -> float:
    scores, tp = [], []
    for c in caches:
        res = c.match(threshold)
        matched = {a for a, _, _ in res.pairs}
        for a in c.order:
            scores.append(_score(c.preds[a]))
            tp.append(a in matched)
    return average_precision(scores, tp, sum(len(c.gts) for c in caches))


def ap_p(preds, gts, threshold: float = 0.5) -> float:
    """AP^p over a dataset; ``preds``/``gts`` are aligned sequences of scenes or human lists."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return _ap(_caches(preds, gts), threshold)


def ap_p_vol(preds, gts) -> float:
    caches = _caches(preds, gts)
    return float(np.mean([_ap(caches, t) for t in THRESHOLDS]))


def _pcp(caches: Sequence[_SceneCache], threshold: float = 0.5) -> float:
    correct = 0
    total = sum(len(g.parts) for c in caches for g in c.gts)
    for c in caches:
        for a, b, _ in c.match(threshold).pairs:
            ious = c.part[a][b]
            correct += sum(1 for cat in c.gts[b].categories if ious[cat] > threshold)
    return correct / total if total else 0.0


def pcp_50(preds, gts) -> float:
    return _pcp(_caches(preds, gts), 0.5)


def evaluate(preds, gts) -> dict:
    """Metrics JSON payload: ap_p_50, ap_p_vol, pcp_50 and the per-threshold APs."""
    caches = _caches(preds, gts)
    per = [{"threshold": t, "ap": _ap(caches, t)} for t in THRESHOLDS]
    return {
        "ap_p_50": next(p["ap"] for p in per if p["threshold"] == 0.5),
        "ap_p_vol": float(np.mean([p["ap"] for p in per])),
        "pcp_50": _pcp(caches, 0.5),
        "per_threshold": per,
        "num_gt_humans": sum(len(c.gts) for c in caches),
        "num_pred_humans": sum(len(c.preds) for c in caches),
    }


def align_scenes(preds: Sequence[ParsingScene], gts: Sequence[ParsingScene]) -> list[ParsingScene]:
    """Prediction scenes reordered to match ``gts`` by id; missing ids become empty predictions."""
    by_id = {p.id: p for p in preds}
    unknown = set(by_id) - {g.id for g in gts}
    if unknown:
        raise ValueError(f"predictions for unknown scene ids: {sorted(unknown)}")
    return [by_id.get(g.id, ParsingScene(g.image, [], g.id, g.num_part_classes)) for g in gts]
