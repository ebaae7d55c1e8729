"""Deterministic "blob-human" scene generator and the on-disk dataset format.

Dataset layout (``format: 1``)::

    root/index.json                 {"format": 1, "num_part_classes": C, "scenes": [id, ...]}
    root/<id>/scene.json            per-scene index (humans, categories, optional scores)
    root/<id>/image.png             RGB image
    root/<id>/human_000.png         indexed PNG, value = category + 1, 0 = background

Predictions written by the decoder use the same layout, with ``score`` fields
filled in, so ground truth and predictions are read by the same code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

FORMAT_VERSION = 1

PART_NAMES = (
    "head", "torso", "left_arm", "right_arm", "left_leg", "right_leg",
    "hat", "left_shoe", "right_shoe", "belt",
)
MAX_PART_CLASSES = len(PART_NAMES)

PALETTE = np.array([
    (230, 190, 150), (200, 40, 40), (40, 160, 60), (40, 80, 200),
    (220, 200, 40), (150, 60, 190), (240, 120, 20), (30, 190, 200),
    (250, 90, 170), (120, 120, 120),
], dtype=np.int16)
BACKGROUND = np.array((24, 24, 32), dtype=np.int16)


class SceneFormatError(ValueError):
    """Malformed dataset content."""


class MissingFileError(SceneFormatError, FileNotFoundError):
    pass


class CategoryRangeError(SceneFormatError):
    pass


class RasterSizeError(SceneFormatError):
    pass


class InfeasibleSceneError(ValueError):
    """The requested humans cannot be placed under the scene constraints."""


def mask_barycenter(mask: np.ndarray) -> tuple[float, float]:
    """Mean (x, y) of the foreground pixel indices."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("empty mask has no barycenter")
    return float(xs.mean()), float(ys.mean())


@dataclass(eq=False)
class PartInstance:
    category: int
    mask: np.ndarray
    score: Optional[float] = None

    @cached_property
    def barycenter(self) -> tuple[float, float]:
        return mask_barycenter(self.mask)

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PartInstance):
            return NotImplemented
        return (self.category == other.category and self.score == other.score
                and self.mask.shape == other.mask.shape and np.array_equal(self.mask, other.mask))


@dataclass(eq=False)
class HumanInstance:
    parts: list[PartInstance]
    score: Optional[float] = None

    def __post_init__(self):
        cats = [p.category for p in self.parts]
        if len(set(cats)) != len(cats):
            raise SceneFormatError(f"duplicate part categories in one human: {cats}")

    @property
    def union_mask(self) -> np.ndarray:
        out = np.zeros_like(self.parts[0].mask, dtype=bool)
        for p in self.parts:
            out |= p.mask
        return out

    @property
    def barycenter(self) -> tuple[float, float]:
        return mask_barycenter(self.union_mask)

    @property
    def categories(self) -> list[int]:
        return [p.category for p in self.parts]

    def part(self, category: int) -> Optional[PartInstance]:
        for p in self.parts:
            if p.category == category:
                return p
        return None

    def label_map(self) -> np.ndarray:
        out = np.zeros(self.parts[0].mask.shape, dtype=np.uint8)
        for p in self.parts:
            out[p.mask] = p.category + 1
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, HumanInstance):
            return NotImplemented
        return self.score == other.score and self.parts == other.parts


@dataclass(eq=False)
class ParsingScene:
    image: np.ndarray
    humans: list[HumanInstance]
    id: str = "scene"
    num_part_classes: int = 6

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    def validate(self) -> None:
        h, w = self.shape
        for human in self.humans:
            for p in human.parts:
                if p.mask.shape != (h, w):
                    raise RasterSizeError(f"mask shape {p.mask.shape} != image shape {(h, w)}")
                if not 0 <= p.category < self.num_part_classes:
                    raise CategoryRangeError(f"category {p.category} outside [0, {self.num_part_classes})")
                if not p.mask.any():
                    raise SceneFormatError("empty part mask")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParsingScene):
            return NotImplemented
        return (self.id == other.id and self.num_part_classes == other.num_part_classes
                and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image) and self.humans == other.humans)


# ------------------------------------------------------------------ generation

@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the synthetic scene distribution.

    ``human_scale`` is the range of human heights in pixels. Primitives are
    rasterized on a ``lattice``-pixel grid. With the default of 8 every mask is
    recoverable exactly from a quarter-resolution soft mask by bilinear
    upsampling and a 0.5 threshold. Visible parts smaller than
    ``min_part_area`` pixels are dropped from the annotation.
    """

    num_humans: tuple[int, int] = (1, 3)
    human_scale: tuple[float, float] = (64.0, 96.0)
    num_part_classes: int = 6
    height: int = 256
    width: int = 256
    occlusion: bool = False
    lattice: int = 8
    min_center_sep: float = 16.0
    min_part_sep: float = 10.0
    min_part_area: int = 1
    confusable: tuple[tuple[int, int], ...] = ()
    noise: float = 4.0
    max_tries: int = 200


def _ellipse(shape, cx, cy, rx, ry):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0


def _strip(shape, x0, y0, angle, length, width):
    """Rectangle of given width hanging from (x0, y0), rotated by ``angle`` from vertical."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    px, py = xx + 0.5 - x0, yy + 0.5 - y0
    dx, dy = np.sin(angle), np.cos(angle)
    along = px * dx + py * dy
    across = -px * dy + py * dx
    return (along >= 0) & (along <= length) & (np.abs(across) <= width / 2)


def _rect(shape, x0, y0, x1, y1):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return (xx + 0.5 >= x0) & (xx + 0.5 <= x1) & (yy + 0.5 >= y0) & (yy + 0.5 <= y1)


def _human_primitives(shape, cx, top, height, rng) -> list[tuple[int, np.ndarray]]:
    """(slot, mask) pairs in drawing order, coordinates in lattice units."""
    H = height
    head_ry = max(1.5, 0.09 * H)
    head_rx = max(1.5, 0.075 * H)
    torso_w = max(3.0, 0.30 * H * rng.uniform(0.9, 1.1))
    torso_top = top + 2 * head_ry - 1
    torso_h = 0.38 * H
    arm_w = max(2.0, 0.085 * H)
    leg_w = max(2.0, 0.11 * H)
    leg_len = top + H - (torso_top + torso_h)
    arm_angles = rng.uniform(0.05, 0.45, size=2)
    leg_angles = rng.uniform(0.0, 0.25, size=2)
    hip = torso_top + torso_h - 0.5
    prims = [
        (4, _strip(shape, cx - 0.22 * torso_w, hip, -leg_angles[0], leg_len, leg_w)),
        (5, _strip(shape, cx + 0.22 * torso_w, hip, leg_angles[1], leg_len, leg_w)),
        (2, _strip(shape, cx - torso_w / 2 - arm_w / 2 + 1, torso_top + 0.5, -arm_angles[0], 0.4 * H, arm_w)),
        (3, _strip(shape, cx + torso_w / 2 + arm_w / 2 - 1, torso_top + 0.5, arm_angles[1], 0.4 * H, arm_w)),
        (1, _rect(shape, cx - torso_w / 2, torso_top, cx + torso_w / 2, torso_top + torso_h)),
        (0, _ellipse(shape, cx, top + head_ry, head_rx, head_ry)),
        (6, _rect(shape, cx - head_rx, top - 0.06 * H, cx + head_rx, top + 0.5 * head_ry)),
        (9, _rect(shape, cx - torso_w / 2, hip - 0.08 * H, cx + torso_w / 2, hip)),
    ]
    feet_y = top + H
    for slot, ang, sx in ((7, -leg_angles[0], -1), (8, leg_angles[1], 1)):
        fx = cx + sx * 0.22 * torso_w + np.sin(ang) * leg_len
        prims.append((slot, _rect(shape, fx - leg_w * 0.75, feet_y - 0.07 * H, fx + leg_w * 0.75, feet_y + 0.02 * H)))
    return prims


def _slot_category(slot: int, num_classes: int) -> Optional[int]:
    # Body slots 0..5 fold into the available classes; accessories need their own class.
    if slot < 6:
        return min(slot, num_classes - 1)
    return slot if slot < num_classes else None


def _category_colors(spec: SceneSpec) -> np.ndarray:
    colors = PALETTE[: spec.num_part_classes].copy()
    for a, b in spec.confusable:
        colors[b] = np.clip(colors[a] + np.array([10, -6, 8]), 0, 255)
    return colors


def generate_scene(seed: int, spec: SceneSpec = SceneSpec(), scene_id: Optional[str] = None) -> ParsingScene:
    """Render one scene. Equal (seed, spec) pairs give bit-identical scenes."""
    if spec.height < 64 or spec.width < 64:
        raise ValueError("scene height and width must be >= 64")
    if not 1 <= spec.num_part_classes <= MAX_PART_CLASSES:
        raise ValueError(f"num_part_classes must lie in [1, {MAX_PART_CLASSES}]")
    if spec.height % spec.lattice or spec.width % spec.lattice:
        raise ValueError("image size must be a multiple of the lattice")
    lo, hi = spec.num_humans
    if not 0 <= lo <= hi:
        raise ValueError("bad num_humans range")
    rng = np.random.default_rng(seed)
    n_humans = int(rng.integers(lo, hi + 1))
    for _ in range(spec.max_tries):
        humans = _try_layout(rng, spec, n_humans)
        if humans is not None:
            break
    else:
        raise InfeasibleSceneError(
            f"could not place {n_humans} humans of height {spec.human_scale} in "
            f"{spec.height}x{spec.width} after {spec.max_tries} attempts")
    image = _render_image(rng, spec, humans)
    scene = ParsingScene(image=image, humans=humans, id=scene_id or f"scene_{seed:06d}",
                         num_part_classes=spec.num_part_classes)
    return scene


def _try_layout(rng, spec: SceneSpec, n_humans: int) -> Optional[list[HumanInstance]]:
    L = spec.lattice
    qh, qw = spec.height // L, spec.width // L
    shape = (qh, qw)
    owner = np.full(shape, -1, dtype=np.int32)
    label = np.full(shape, -1, dtype=np.int32)
    boxes = []
    for k in range(n_humans):
        for _ in range(50):
            height = rng.uniform(*spec.human_scale) / L
            half_w = 0.3 * height
            if height + 2 > qh or 2 * half_w + 2 > qw:
                raise InfeasibleSceneError(f"human height {height * L:.0f}px does not fit the image")
            cx = rng.uniform(half_w + 1, qw - half_w - 1)
            top = rng.uniform(1 + 0.06 * height, qh - height - 1)
            prims = _human_primitives(shape, cx, top, height, rng)
            if spec.occlusion:
                break
            body = np.zeros(shape, dtype=bool)
            for _, m in prims:
                body |= m
            ys, xs = np.nonzero(body)
            box = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
            if not any(_boxes_overlap(box, b) for b in boxes):
                boxes.append(box)
                break
        else:
            return None
        for slot, m in prims:
            cat = _slot_category(slot, spec.num_part_classes)
            if cat is None:
                continue
            owner[m] = k
            label[m] = cat
    humans = []
    for k in range(n_humans):
        parts = []
        for cat in range(spec.num_part_classes):
            q = (owner == k) & (label == cat)
            if q.sum() * L * L >= max(1, spec.min_part_area):
                full = np.repeat(np.repeat(q, L, axis=0), L, axis=1)
                parts.append(PartInstance(cat, full))
        if parts:
            humans.append(HumanInstance(parts))
    if not _separated([h.barycenter for h in humans], spec.min_center_sep):
        return None
    if not _separated([p.barycenter for h in humans for p in h.parts], spec.min_part_sep):
        return None
    return humans


def _boxes_overlap(a, b, margin: float = 1.0) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0]
                or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _separated(points: Sequence[tuple[float, float]], min_dist: float) -> bool:
    if min_dist <= 0 or len(points) < 2:
        return True
    pts = np.asarray(points)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    d[np.diag_indices(len(pts))] = np.inf
    return bool(d.min() >= min_dist)


def _render_image(rng, spec: SceneSpec, humans: list[HumanInstance]) -> np.ndarray:
    colors = _category_colors(spec)
    img = np.empty((spec.height, spec.width, 3), dtype=np.float64)
    img[:] = BACKGROUND
    for human in humans:
        tint = rng.uniform(0.8, 1.1)
        for p in human.parts:
            img[p.mask] = colors[p.category] * tint
    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def scene_seeds(n: int, seed: int) -> list[int]:
    """Per-scene seeds of ``generate_dataset``."""
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)]


def generate_dataset(n: int, seed: int, spec: SceneSpec = SceneSpec()) -> list[ParsingScene]:
    """``n`` scenes with per-scene seeds drawn from ``seed``."""
    return [generate_scene(s, spec, scene_id=f"scene_{i:04d}") for i, s in enumerate(scene_seeds(n, seed))]


# ------------------------------------------------------------------------ I/O

def _indexed_png(labels: np.ndarray) -> Image.Image:
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    pal = [0, 0, 0] + [int(c) for color in PALETTE for c in color]
    img.putpalette(pal + [0] * (768 - len(pal)))
    return img


def write_scene(scene: ParsingScene, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    Image.fromarray(scene.image).save(path / "image.png")
    entries = []
    for k, human in enumerate(scene.humans):
        fname = f"human_{k:03d}.png"
        _indexed_png(human.label_map()).save(path / fname)
        entry = {"file": fname, "categories": human.categories}
        if human.score is not None:
            entry["score"] = human.score
        if any(p.score is not None for p in human.parts):
            entry["part_scores"] = [p.score for p in human.parts]
        entries.append(entry)
    index = {
        "format": FORMAT_VERSION,
        "id": scene.id,
        "height": scene.shape[0],
        "width": scene.shape[1],
        "num_part_classes": scene.num_part_classes,
        "humans": entries,
    }
    (path / "scene.json").write_text(json.dumps(index, indent=2))
    return path


def _load_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    with Image.open(path) as im:
        return np.array(im)


def read_scene(path) -> ParsingScene:
    path = Path(path)
    meta_path = path / "scene.json"
    if not meta_path.is_file():
        raise MissingFileError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != FORMAT_VERSION:
        raise SceneFormatError(f"unsupported format {meta.get('format')!r}")
    num_classes = int(meta["num_part_classes"])
    image = _load_png(path / "image.png")
    h, w = int(meta["height"]), int(meta["width"])
    if image.shape[:2] != (h, w):
        raise RasterSizeError(f"image is {image.shape[:2]}, index says {(h, w)}")
    humans = []
    for entry in meta["humans"]:
        labels = _load_png(path / entry["file"])
        if labels.shape != (h, w):
            raise RasterSizeError(f"{entry['file']} is {labels.shape}, expected {(h, w)}")
        present = sorted(int(v) - 1 for v in np.unique(labels) if v != 0)
        if present and present[-1] >= num_classes:
            raise CategoryRangeError(f"{entry['file']}: category {present[-1]} >= {num_classes}")
        listed = [int(c) for c in entry["categories"]]
        if any(not 0 <= c < num_classes for c in listed):
            raise CategoryRangeError(f"{entry['file']}: listed categories {listed} outside [0, {num_classes})")
        if sorted(listed) != present:
            raise SceneFormatError(f"{entry['file']}: categories {listed} do not match raster {present}")
        scores = entry.get("part_scores") or [None] * len(listed)
        parts = [PartInstance(c, labels == c + 1, s) for c, s in zip(listed, scores)]
        humans.append(HumanInstance(parts, entry.get("score")))
    return ParsingScene(image=image, humans=humans, id=meta["id"], num_part_classes=num_classes)


def write_dataset(scenes: Sequence[ParsingScene], root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        write_scene(s, root / s.id)
    num_classes = scenes[0].num_part_classes if scenes else None
    index = {"format": FORMAT_VERSION, "num_part_classes": num_classes, "scenes": [s.id for s in scenes]}
    (root / "index.json").write_text(json.dumps(index, indent=2))
    return root


def read_dataset(root) -> list[ParsingScene]:
    root = Path(root)
    index_path = root / "index.json"
    if not index_path.is_file():
        raise MissingFileError(f"missing dataset index: {index_path}")
    index = json.loads(index_path.read_text())
    if index.get("format") != FORMAT_VERSION:
        raise SceneFormatError(f"unsupported dataset format {index.get('format')!r}")
    return [read_scene(root / sid) for sid in index["scenes"]]
