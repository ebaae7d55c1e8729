"""Supervision targets: center/part positives, offsets and per-cell mask targets.

Grid coordinates are continuous with cell ``k`` centered at ``k``: a pixel
index ``x`` maps to ``(x + 0.5) * S / W - 0.5`` and the containing cell is
``floor((x + 0.5) * S / W)``. Cells are addressed as ``(x, y)``; arrays are
stored row-major, i.e. indexed ``[..., y, x]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .config import GridSpec, level_for_scale
from .synthdata import HumanInstance, ParsingScene, PartInstance

MASK_STRIDE = 4


def to_grid(x: float, size: int, grid: int) -> float:
    """Continuous grid coordinate of pixel coordinate ``x`` on an axis of ``size`` pixels."""
    return (x + 0.5) * grid / size - 0.5


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def center_region(cx: float, cy: float, h: float, w: float, eps: float,
                  grid_w: int, grid_h: int | None = None) -> list[tuple[int, int]]:
    """Cells whose centers fall in the ``eps*w`` x ``eps*h`` box around (cx, cy).

    Falls back to the single nearest cell when the box holds no cell center.
    All quantities are in grid units.
    """
    grid_h = grid_w if grid_h is None else grid_h
    hw, hh = eps * w / 2, eps * h / 2
    x0, x1 = max(0, math.ceil(cx - hw)), min(grid_w - 1, math.floor(cx + hw))
    y0, y1 = max(0, math.ceil(cy - hh)), min(grid_h - 1, math.floor(cy + hh))
    cells = [(i, j) for j in range(y0, y1 + 1) for i in range(x0, x1 + 1)]
    if not cells:
        i = min(max(round_half_up(cx), 0), grid_w - 1)
        j = min(max(round_half_up(cy), 0), grid_h - 1)
        cells = [(i, j)]
    return cells


def mask_extent(mask: np.ndarray) -> tuple[int, int]:
    """(height, width) of the tight bounding box, in pixels."""
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    return int(ys[-1] - ys[0] + 1), int(xs[-1] - xs[0] + 1)


def instance_scale(mask: np.ndarray) -> float:
    return math.sqrt(float(mask.sum()))


def downsample_mask(mask: np.ndarray, stride: int = MASK_STRIDE) -> np.ndarray:
    """Nearest-neighbour downsampling (keeps masks binary)."""
    off = stride // 2
    return mask[off::stride, off::stride].copy()


class MaskTarget(NamedTuple):
    level: int
    cell: tuple[int, int]
    category: int
    mask: np.ndarray


@dataclass
class TargetSet:
    grids: tuple[int, ...]
    human_grid: int
    center_pos: np.ndarray          # (S, S) uint8
    center_owner: np.ndarray        # (S, S) int, human index or -1
    part_pos: list[np.ndarray]      # per level (C_P, S_l, S_l) uint8
    part_owner: list[np.ndarray]    # per level (C_P, S_l, S_l) int, flat part index or -1
    offset: np.ndarray              # (C_P, 2, S, S) float64, (dx, dy) grid units
    offset_valid: np.ndarray        # (C_P, S, S) uint8
    offset_weight: np.ndarray       # (C_P, S, S) float64
    mask_targets: list[MaskTarget] = field(default_factory=list)
    num_humans: int = 0

    def center_counts(self) -> np.ndarray:
        """Number of center-positive cells owned by each human."""
        owners = self.center_owner[self.center_owner >= 0]
        n = self.num_humans
        return np.bincount(owners, minlength=n) if n else np.zeros(0, dtype=int)

    def stacked_masks(self):
        """Mask targets as arrays: level (N,), y (N,), x (N,), category (N,), masks (N, h, w)."""
        if not self.mask_targets:
            return None
        lv = np.array([t.level for t in self.mask_targets])
        xs = np.array([t.cell[0] for t in self.mask_targets])
        ys = np.array([t.cell[1] for t in self.mask_targets])
        cats = np.array([t.category for t in self.mask_targets])
        masks = np.stack([t.mask for t in self.mask_targets])
        return lv, ys, xs, cats, masks


def part_scale_levels(part: PartInstance, spec: GridSpec) -> set[int]:
    return level_for_scale(instance_scale(part.mask), spec)


def assign_targets(scene: ParsingScene, spec: GridSpec, eps: float) -> TargetSet:
    H, W = scene.shape
    S = spec.human_grid
    C = scene.num_part_classes
    grids = spec.grids

    center_pos = np.zeros((S, S), dtype=np.uint8)
    center_owner = np.full((S, S), -1, dtype=np.int64)
    offset = np.zeros((C, 2, S, S), dtype=np.float64)
    offset_valid = np.zeros((C, S, S), dtype=np.uint8)
    offset_weight = np.zeros((C, S, S), dtype=np.float64)
    part_pos = [np.zeros((C, g, g), dtype=np.uint8) for g in grids]
    part_owner = [np.full((C, g, g), -1, dtype=np.int64) for g in grids]

    # Larger instances first so that smaller ones win contested cells.
    humans = scene.humans
    union = [h.union_mask for h in humans]
    areas = [int(u.sum()) for u in union]
    human_info = []
    for k in sorted(range(len(humans)), key=lambda k: -areas[k]):
        bx, by = humans[k].barycenter
        eh, ew = mask_extent(union[k])
        gh, gw = eh * S / H, ew * S / W
        cells = center_region(to_grid(bx, W, S), to_grid(by, H, S), gh, gw, eps, S)
        for i, j in cells:
            center_pos[j, i] = 1
            center_owner[j, i] = k
        human_info.append((k, gh, gw))

    for k, gh, gw in human_info:
        owned = center_owner == k
        if not owned.any():
            continue
        jj, ii = np.nonzero(owned)
        weight = 1.0 / math.sqrt(gh * gw)
        for part in humans[k].parts:
            px, py = part.barycenter
            gx, gy = to_grid(px, W, S), to_grid(py, H, S)
            p = part.category
            offset[p, 0, jj, ii] = gx - ii
            offset[p, 1, jj, ii] = gy - jj
            offset_valid[p, jj, ii] = 1
            offset_weight[p, jj, ii] = weight

    flat_parts = [(k, part) for k, h in enumerate(humans) for part in h.parts]
    order = sorted(range(len(flat_parts)), key=lambda n: -flat_parts[n][1].area)
    for n in order:
        _, part = flat_parts[n]
        px, py = part.barycenter
        eh, ew = mask_extent(part.mask)
        for lv in sorted(part_scale_levels(part, spec)):
            g = grids[lv]
            cells = center_region(to_grid(px, W, g), to_grid(py, H, g), eh * g / H, ew * g / W, eps, g)
            for i, j in cells:
                part_pos[lv][part.category, j, i] = 1
                part_owner[lv][part.category, j, i] = n

    small = {}
    mask_targets = []
    for lv in range(len(grids)):
        cs, js, is_ = np.nonzero(part_owner[lv] >= 0)
        for c, j, i in zip(cs, js, is_):
            n = int(part_owner[lv][c, j, i])
            if n not in small:
                small[n] = downsample_mask(flat_parts[n][1].mask)
            mask_targets.append(MaskTarget(lv, (int(i), int(j)), int(c), small[n]))

    return TargetSet(
        grids=grids, human_grid=S, center_pos=center_pos, center_owner=center_owner,
        part_pos=part_pos, part_owner=part_owner, offset=offset, offset_valid=offset_valid,
        offset_weight=offset_weight, mask_targets=mask_targets, num_humans=len(humans),
    )


def flat_part_list(scene: ParsingScene) -> list[tuple[int, PartInstance]]:
    """(human index, part) pairs in the order used for ``part_owner`` indices."""
    return [(k, part) for k, h in enumerate(scene.humans) for part in h.parts]
