"""Static overlays: category-coloured part masks with per-human outlines."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .synthdata import PALETTE, ParsingScene

OUTLINE = np.array((255, 255, 255), dtype=np.float64)


def render_overlay(image: np.ndarray, pred: ParsingScene, alpha: float = 0.5) -> np.ndarray:
    """uint8 (H, W, 3) composite; an image without predicted humans is returned unchanged."""
    if image.shape[:2] != pred.shape:
        raise ValueError(f"image is {image.shape[:2]}, prediction is {pred.shape}")
    out = image.astype(np.float64)
    for human in pred.humans:
        for part in human.parts:
            color = PALETTE[part.category % len(PALETTE)].astype(np.float64)
            out[part.mask] = (1 - alpha) * out[part.mask] + alpha * color
        union = human.union_mask
        edge = union & ~ndimage.binary_erosion(union)
        out[edge] = OUTLINE
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
