"""Configuration objects, grid layout and config-file loading.

The config file is YAML with three top-level sections (``model``, ``grid``,
``train``). Every key is optional; missing keys take the defaults defined on
the dataclasses below. See README.md for the full schema.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

CONFIG_ENV_VAR = "SMP_CONFIG"


class ConfigError(ValueError):
    """Raised for unparsable config files or invariant violations.

    ``field`` names the offending key (dotted path) when known, ``line`` is the
    1-based line number for parse failures.
    """

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        prefix = ""
        if line is not None:
            prefix = f"line {line}: "
        if field is not None:
            prefix += f"{field}: "
        super().__init__(prefix + message)


@dataclass(frozen=True)
class LevelSpec:
    name: str
    scale_min: float
    scale_max: float
    grid: int
    min_inclusive: bool = True
    max_inclusive: bool = True

    def contains(self, scale: float) -> bool:
        lo_ok = scale >= self.scale_min if self.min_inclusive else scale > self.scale_min
        hi_ok = scale <= self.scale_max if self.max_inclusive else scale < self.scale_max
        return lo_ok and hi_ok


# Pyramid levels F2..F6 with per-bound inclusivity, so every scale lands on one or two levels:
# F2 <= 96, F3..F5 open intervals, F6 >= 384.
DEFAULT_LEVELS = (
    LevelSpec("F2", 0.0, 96.0, 40, True, True),
    LevelSpec("F3", 48.0, 192.0, 36, False, False),
    LevelSpec("F4", 96.0, 384.0, 24, False, False),
    LevelSpec("F5", 192.0, 768.0, 16, False, False),
    LevelSpec("F6", 384.0, math.inf, 12, True, True),
)


@dataclass(frozen=True)
class GridSpec:
    levels: tuple[LevelSpec, ...] = DEFAULT_LEVELS
    human_grid: int = 40

    @property
    def grids(self) -> tuple[int, ...]:
        return tuple(lv.grid for lv in self.levels)

    def validate(self) -> None:
        if not self.levels:
            raise ConfigError("at least one level required", "grid.levels")
        grids = self.grids
        if any(g < 4 for g in grids):
            raise ConfigError(f"all grids must be >= 4, got {grids}", "grid.grids")
        if any(b >= a for a, b in zip(grids, grids[1:])):
            raise ConfigError(f"grid counts must strictly decrease, got {grids}", "grid.grids")
        if self.human_grid < 4:
            raise ConfigError("must be >= 4", "grid.human_grid")
        for lv in self.levels:
            if not lv.scale_min < lv.scale_max:
                raise ConfigError(f"empty scale range for {lv.name}", "grid.scale_ranges")
        gap = _coverage_gap(self.levels)
        if gap is not None:
            raise ConfigError(f"scale {gap:g} is not covered by any level", "grid.scale_ranges")


def _coverage_gap(levels) -> Optional[float]:
    # Membership only changes at range endpoints, so probing every endpoint and
    # every midpoint between consecutive endpoints is exhaustive.
    points = sorted({1.0} | {b for lv in levels for b in (lv.scale_min, lv.scale_max)
                             if math.isfinite(b) and b >= 1.0})
    probes = list(points) + [(a + b) / 2 for a, b in zip(points, points[1:])] + [points[-1] * 2 + 1]
    for s in probes:
        if not any(lv.contains(s) for lv in levels):
            return s
    return None


def level_for_scale(scale: float, spec: GridSpec) -> set[int]:
    """Indices of every pyramid level whose scale range contains ``scale``."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return {k for k, lv in enumerate(spec.levels) if lv.contains(scale)}


@dataclass(frozen=True)
class LossWeights:
    center: float = 1.0
    part: float = 1.0
    dice: float = 3.0
    offset: float = 10.0


@dataclass(frozen=True)
class Thresholds:
    center: float = 0.1
    part: float = 0.3
    nms: float = 0.1
    mask_bin: float = 0.5


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0


@dataclass(frozen=True)
class MIRConfig:
    enabled: bool = False
    roi_size: int = 14
    epochs: int = 6
    channels: int = 32
    hidden: int = 128
    lr: float = 0.001
    aux_weight: float = 1.0
    batch_size: int = 2
    context: float = 2.0


@dataclass(frozen=True)
class ModelConfig:
    num_part_classes: int = 6
    kernel_channels: int = 32
    backbone_widths: tuple[int, ...] = (16, 24, 32, 48, 64)
    fpn_channels: int = 32
    head_channels: int = 48
    tower_depth: int = 2
    epsilon: float = 0.2
    rfr: bool = True
    rfr_gain: float = 1.0
    rfr_margin: float = 0.0
    mask_coords: bool = True
    offset_block: str = "plain"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    thresholds: Thresholds = field(default_factory=Thresholds)
    focal: FocalParams = field(default_factory=FocalParams)
    nms_sigma: float = 2.0
    mir: MIRConfig = field(default_factory=MIRConfig)

    def validate(self) -> None:
        if self.num_part_classes < 1:
            raise ConfigError("must be >= 1", "model.num_part_classes")
        for name in ("kernel_channels", "fpn_channels", "head_channels", "tower_depth"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"model.{name}")
        if len(self.backbone_widths) != 5 or any(w < 1 for w in self.backbone_widths):
            raise ConfigError("need five positive stage widths", "model.backbone_widths")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"must lie in (0, 1), got {self.epsilon}", "model.epsilon")
        for f in fields(LossWeights):
            if not getattr(self.loss_weights, f.name) > 0:
                raise ConfigError("must be > 0", f"model.loss_weights.{f.name}")
        for f in fields(Thresholds):
            v = getattr(self.thresholds, f.name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"must lie in (0, 1), got {v}", f"model.thresholds.{f.name}")
        if self.head_channels % self.num_part_classes:
            raise ConfigError(
                f"{self.head_channels} fused channels cannot be split into "
                f"{self.num_part_classes} equal offset branches", "model.head_channels")
        if self.offset_block not in ("plain",):
            raise ConfigError(f"unsupported offset block {self.offset_block!r}", "model.offset_block")
        if self.nms_sigma <= 0:
            raise ConfigError("must be > 0", "model.nms_sigma")
        if self.focal.gamma < 0 or not 0.0 < self.focal.alpha < 1.0:
            raise ConfigError("alpha in (0, 1), gamma >= 0", "model.focal")
        if self.mir.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "model.mir.batch_size")
        if self.mir.context < 0:
            raise ConfigError("context must be >= 0", "model.mir.context")
        if self.mir.roi_size < 1 or self.mir.epochs < 1:
            raise ConfigError("roi_size and epochs must be >= 1", "model.mir")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 12
    lr_decay_epochs: tuple[int, ...] = (9, 11)
    max_iters: Optional[int] = None
    seed: int = 0
    scale_jitter_range: Optional[tuple[int, int]] = None
    log_every: int = 1
    checkpoint_every: int = 100
    grad_clip: Optional[float] = 10.0
    warmup_iters: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "train.batch_size")
        if not self.base_lr > 0:
            raise ConfigError("must be > 0", "train.base_lr")
        if self.epochs < 1:
            raise ConfigError("must be >= 1", "train.epochs")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigError("must be >= 1", "train.max_iters")
        if self.scale_jitter_range is not None:
            lo, hi = self.scale_jitter_range
            if not 0 < lo <= hi:
                raise ConfigError("need 0 < low <= high", "train.scale_jitter_range")


# Full-resolution recipe: shorter side jittered in [640, 800]. Not used by the desk default.
FULL_SCALE_JITTER = (640, 800)


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "Config":
        self.model.validate()
        self.grid.validate()
        self.train.validate()
        return self


# ---------------------------------------------------------------- file format

def _grid_to_dict(spec: GridSpec) -> dict:
    def bound(v):
        return v if math.isfinite(v) else None
    return {
        "names": [lv.name for lv in spec.levels],
        "grids": list(spec.grids),
        "scale_min": [bound(lv.scale_min) for lv in spec.levels],
        "scale_max": [bound(lv.scale_max) for lv in spec.levels],
        "min_inclusive": [lv.min_inclusive for lv in spec.levels],
        "max_inclusive": [lv.max_inclusive for lv in spec.levels],
        "human_grid": spec.human_grid,
    }


def _grid_from_dict(d: dict) -> GridSpec:
    d = dict(d)
    human_grid = d.pop("human_grid", GridSpec.human_grid)
    if not d:
        return GridSpec(human_grid=human_grid)
    n = len(d.get("grids", DEFAULT_LEVELS))
    cols = {}
    defaults = {
        "names": [lv.name for lv in DEFAULT_LEVELS],
        "grids": [lv.grid for lv in DEFAULT_LEVELS],
        "scale_min": [lv.scale_min for lv in DEFAULT_LEVELS],
        "scale_max": [lv.scale_max for lv in DEFAULT_LEVELS],
        "min_inclusive": [lv.min_inclusive for lv in DEFAULT_LEVELS],
        "max_inclusive": [lv.max_inclusive for lv in DEFAULT_LEVELS],
    }
    for key, default in defaults.items():
        val = d.pop(key, None)
        if val is None:
            if n != len(DEFAULT_LEVELS) and key != "names":
                raise ConfigError(f"must be given when there are {n} levels", f"grid.{key}")
            val = default if key != "names" or n == len(DEFAULT_LEVELS) else [f"F{k + 2}" for k in range(n)]
        if len(val) != n:
            raise ConfigError(f"expected {n} entries, got {len(val)}", f"grid.{key}")
        cols[key] = list(val)
    if d:
        raise ConfigError(f"unknown key(s) {sorted(d)}", "grid")
    levels = []
    for k in range(n):
        smax = cols["scale_max"][k]
        smin = cols["scale_min"][k]
        levels.append(LevelSpec(
            name=str(cols["names"][k]),
            scale_min=0.0 if smin is None else float(smin),
            scale_max=math.inf if smax is None else float(smax),
            grid=int(cols["grids"][k]),
            min_inclusive=bool(cols["min_inclusive"][k]),
            max_inclusive=bool(cols["max_inclusive"][k]),
        ))
    return GridSpec(levels=tuple(levels), human_grid=int(human_grid))


def _build(cls, data: Any, path: str):
    """Recursively build a (frozen) dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", path)
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)}", path)
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        sub = f"{path}.{name}"
        if hasattr(current, "__dataclass_fields__"):
            kwargs[name] = _build(type(current), value, sub)
        elif isinstance(current, tuple) or name == "scale_jitter_range":
            kwargs[name] = None if value is None else tuple(value)
        else:
            kwargs[name] = value
    try:
        return replace(defaults, **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), path) from exc


def config_from_dict(data: Optional[dict]) -> Config:
    data = dict(data or {})
    unknown = set(data) - {"model", "grid", "train"}
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}")
    cfg = Config(
        model=_build(ModelConfig, data.get("model"), "model"),
        grid=_grid_from_dict(data.get("grid") or {}),
        train=_build(TrainConfig, data.get("train"), "train"),
    )
    return cfg.validate()


def config_to_dict(cfg: Config) -> dict:
    def plain(obj):
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        return obj
    return {
        "model": plain(asdict(cfg.model)),
        "grid": _grid_to_dict(cfg.grid),
        "train": plain(asdict(cfg.train)),
    }


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def parse_config(text: str) -> Config:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"cannot parse config: {getattr(exc, 'problem', exc)}", line=line) from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1)
    return config_from_dict(data)


def load_config(path: Optional[os.PathLike | str] = None) -> Config:
    """Load and validate a config file.

    With ``path=None`` the ``SMP_CONFIG`` environment variable is consulted;
    if that is unset too, the defaults are returned.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
        if not path:
            return Config().validate()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text())
