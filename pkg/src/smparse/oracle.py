"""Reference constructions used to validate decoding.

``oracle_outputs`` builds head outputs directly from a scene and its targets:
unit-confidence part positives, the exact offsets, and one mask-feature
channel per ground-truth part whose dynamic kernel is the matching one-hot
vector. The mask-feature channels are fitted with a linear program so that
bilinear upsampling of the quarter-resolution soft mask, thresholded at 0.5,
reproduces the full-resolution mask.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import torch
from scipy.optimize import linprog

from .network import HeadOutputs
from .synthdata import ParsingScene
from .targets import MASK_STRIDE, TargetSet, flat_part_list, to_grid

V_MIN, V_MAX = 1e-3, 1 - 1e-3
MARGIN = 1e-3


@lru_cache(maxsize=None)
def upsample_matrix(n: int, factor: int = MASK_STRIDE) -> sp.csr_matrix:
    """(n*factor, n) matrix of 1-D bilinear weights (half-pixel centers, edge clamped)."""
    rows, cols, vals = [], [], []
    for p in range(n * factor):
        src = max((p + 0.5) / factor - 0.5, 0.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        rows += [p, p]
        cols += [i0, i1]
        vals += [1 - lam, lam]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n * factor, n))


def fit_soft_mask(mask: np.ndarray, factor: int = MASK_STRIDE) -> np.ndarray:
    """Quarter-resolution field in [V_MIN, V_MAX] whose bilinear upsampling thresholds to ``mask``.

    Solves min sum(slack) s.t. s_k (A v - 0.5) >= MARGIN - slack_k over the
    mask's bounding box plus one block, where s_k = +1 inside the mask and -1
    outside. A zero objective means an exact fit.
    """
    H, W = mask.shape
    h, w = H // factor, W // factor
    off = factor // 2
    small = mask[off::factor, off::factor]
    ys, xs = np.nonzero(small)
    if ys.size == 0:
        ys, xs = np.nonzero(mask)
        ys, xs = ys // factor, xs // factor
    y0, y1 = max(ys.min() - 1, 0), min(ys.max() + 2, h)
    x0, x1 = max(xs.min() - 1, 0), min(xs.max() + 2, w)
    Uy = upsample_matrix(h, factor)[y0 * factor:y1 * factor, y0:y1]
    Ux = upsample_matrix(w, factor)[x0 * factor:x1 * factor, x0:x1]
    A = sp.kron(Uy, Ux).tocsr()
    sub = mask[y0 * factor:y1 * factor, x0 * factor:x1 * factor]
    s = np.where(sub.ravel(), 1.0, -1.0)
    nv, m = A.shape[1], A.shape[0]
    A_ub = sp.hstack([-sp.diags(s) @ A, -sp.eye(m)]).tocsr()
    b_ub = -0.5 * s - MARGIN
    c = np.concatenate([np.zeros(nv), np.ones(m)])
    bounds = [(V_MIN, V_MAX)] * nv + [(0, None)] * m
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"mask fit failed: {res.message}")
    v = np.full((h, w), V_MIN)
    # HiGHS may overshoot its bounds by ~1e-17
    v[y0:y1, x0:x1] = np.clip(res.x[:nv], V_MIN, V_MAX).reshape(y1 - y0, x1 - x0)
    return v


def _logit(v):
    return np.log(v) - np.log1p(-v)


def _peak_cell(owned: np.ndarray, gx: float, gy: float) -> tuple[int, int]:
    jj, ii = np.nonzero(owned)
    d = (ii - gx) ** 2 + (jj - gy) ** 2
    k = int(np.argmin(d))
    return int(ii[k]), int(jj[k])


def oracle_outputs(scene: ParsingScene, targets: TargetSet, kernel_channels: int | None = None,
                   dtype=torch.float64) -> HeadOutputs:
    """Head outputs that decode back to ``scene`` (batch of one).

    Levels whose grid differs from the human grid are bilinearly resized at
    decode time, so their positives (category score and kernel) are also
    written on the one-cell ring around each positive cell; true positives
    take precedence over ring cells and smaller parts over larger ones.
    """
    H, W = scene.shape
    S = targets.human_grid
    C = scene.num_part_classes
    flat = flat_part_list(scene)
    n_parts = len(flat)
    K = max(kernel_channels or 0, n_parts, 1)

    # Each human's region decays away from its peak so the peak is the only local maximum.
    center = np.full((S, S), 1e-3)
    jj, ii = np.mgrid[0:S, 0:S]
    for k, human in enumerate(scene.humans):
        owned = targets.center_owner == k
        if owned.any():
            bx, by = human.barycenter
            i, j = _peak_cell(owned, to_grid(bx, W, S), to_grid(by, H, S))
            dist = np.sqrt((ii - i) ** 2 + (jj - j) ** 2)
            center[owned] = 0.9 - 0.01 * dist[owned]
            center[j, i] = 1.0 - 1e-6

    mask_feat = np.full((K, H // MASK_STRIDE, W // MASK_STRIDE), _logit(V_MIN))
    for n, (_, part) in enumerate(flat):
        mask_feat[n] = _logit(fit_soft_mask(part.mask))

    parts, kernels = [], []
    areas = np.array([p.area for _, p in flat]) if flat else np.zeros(0)
    for lv, g in enumerate(targets.grids):
        hp = np.full((C, g, g), 1e-3)
        ker = np.zeros((K, g, g))
        owner = targets.part_owner[lv]
        if g != S:
            for n in np.argsort(-areas, kind="stable"):
                cs, js, is_ = np.nonzero(owner == n)
                for c, j, i in zip(cs, js, is_):
                    sl = (slice(max(j - 1, 0), j + 2), slice(max(i - 1, 0), i + 2))
                    hp[c][sl] = 1.0
                    ker[:, sl[0], sl[1]] = 0.0
                    ker[n][sl] = 1.0
        cs, js, is_ = np.nonzero(owner >= 0)
        for c, j, i in zip(cs, js, is_):
            hp[c, j, i] = 1.0
        order = sorted(zip(cs, js, is_), key=lambda t: -areas[owner[t]])
        for c, j, i in order:
            ker[:, j, i] = 0.0
            ker[owner[c, j, i], j, i] = 1.0
        parts.append(torch.tensor(hp, dtype=dtype)[None])
        kernels.append(torch.tensor(ker, dtype=dtype)[None])

    return HeadOutputs(
        center=torch.tensor(center, dtype=dtype)[None, None],
        offset=torch.tensor(targets.offset, dtype=dtype)[None],
        part=parts,
        kernel=kernels,
        mask_feat=torch.tensor(mask_feat, dtype=dtype)[None],
    )
