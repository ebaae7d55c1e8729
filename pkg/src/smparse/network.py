"""Backbone, pyramid fusion, the three prediction heads, RFR and MIR.

Tensors are channel-first. Shapes produced by :class:`SMPNet` for a batch of
``N`` images of size ``H x W``::

    center      (N, 1, S, S)            sigmoid probabilities
    offset      (N, C_P, 2, S, S)       (dx, dy) in human-grid units
    part[l]     (N, C_P, S_l, S_l)      sigmoid probabilities
    kernel[l]   (N, C_K, S_l, S_l)
    mask_feat   (N, C_K, H/4, W/4)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from .config import GridSpec, ModelConfig

CHECKPOINT_FORMAT = 1
PRIOR_PROB = 0.01
IMAGE_MEAN = 0.5
IMAGE_STD = 0.25


def image_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """uint8 (H, W, 3) or (N, H, W, 3) arrays to normalized (N, 3, H, W) tensors."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).to(dtype)
    return (t / 255.0 - IMAGE_MEAN) / IMAGE_STD


def coord_channels(n: int, h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """(n, 2, h, w): x then y, each spanning [-1, 1] across the map."""
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device)
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx, yy]).unsqueeze(0).expand(n, 2, h, w)


def add_coords(x: torch.Tensor) -> torch.Tensor:
    n, _, h, w = x.shape
    return torch.cat([x, coord_channels(n, h, w, x.dtype, x.device)], dim=1)


def resize(x: torch.Tensor, size) -> torch.Tensor:
    if isinstance(size, int):
        size = (size, size)
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def _gn_groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ConvGN(nn.Sequential):
    def __init__(self, cin, cout, stride=1, groups=1, norm_groups=None):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1, groups=groups, bias=False),
            nn.GroupNorm(norm_groups or _gn_groups(cout), cout),
            nn.ReLU(inplace=True),
        )


class Backbone(nn.Module):
    """Five stride-2 stages; stage ``k`` (C1..C5) has stride ``2**k``."""

    def __init__(self, widths):
        super().__init__()
        stages = []
        cin = 3
        for w in widths:
            stages.append(nn.Sequential(ConvGN(cin, w, stride=2), ConvGN(w, w)))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} must be divisible by 32")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class FPN(nn.Module):
    """Top-down pyramid over C2..C5 plus an extra stride-64 level (F6)."""

    def __init__(self, in_widths, channels):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_widths)
        self.output = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in in_widths)

    def forward(self, feats):
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        for k in range(len(lat) - 1, 0, -1):
            lat[k - 1] = lat[k - 1] + F.interpolate(lat[k], size=lat[k - 1].shape[-2:], mode="nearest")
        outs = [conv(x) for conv, x in zip(self.output, lat)]
        outs.append(F.max_pool2d(outs[-1], 1, stride=2))
        return outs


class Fusion(nn.Module):
    """Resize every pyramid level to S x S, concatenate and mix with a 3x3 conv."""

    def __init__(self, fpn_channels, num_levels, out_channels):
        super().__init__()
        self.mix = ConvGN(fpn_channels * num_levels, out_channels)

    def forward(self, levels, grid):
        return self.mix(torch.cat([resize(f, grid) for f in levels], dim=1))


def _tower(cin, cout, depth):
    layers = [ConvGN(cin if k == 0 else cout, cout) for k in range(depth)]
    return nn.Sequential(*layers)


class CenterHead(nn.Module):
    def __init__(self, channels, depth):
        super().__init__()
        self.tower = _tower(channels + 2, channels, depth)
        self.out = nn.Conv2d(channels, 1, 3, padding=1)
        nn.init.normal_(self.out.weight, std=0.01)
        nn.init.constant_(self.out.bias, -math.log((1 - PRIOR_PROB) / PRIOR_PROB))

    def forward(self, fused_coord):
        return torch.sigmoid(self.out(self.tower(fused_coord)))


class OffsetHead(nn.Module):
    """Decoupled per-part regression branches.

    The fused feature is split channel-wise into ``C_P`` equal groups; each
    group, with the two coordinate channels appended, feeds its own branch of
    3x3 convolutions (implemented as grouped convolutions).
    """

    def __init__(self, channels, num_parts, depth):
        super().__init__()
        if channels % num_parts:
            raise ValueError(f"{channels} fused channels are not divisible by {num_parts} parts")
        self.num_parts = num_parts
        self.group = channels // num_parts
        g = self.group
        layers = []
        cin = num_parts * (g + 2)
        for _ in range(depth):
            layers += [
                nn.Conv2d(cin, num_parts * g, 3, padding=1, groups=num_parts, bias=False),
                nn.GroupNorm(num_parts, num_parts * g),
                nn.ReLU(inplace=True),
            ]
            cin = num_parts * g
        self.tower = nn.Sequential(*layers)
        self.out = nn.Conv2d(cin, num_parts * 2, 3, padding=1, groups=num_parts)
        nn.init.normal_(self.out.weight, std=0.01)
        nn.init.zeros_(self.out.bias)

    def branch_inputs(self, fused):
        n, c, h, w = fused.shape
        if c != self.num_parts * self.group:
            raise ValueError(f"expected {self.num_parts * self.group} channels, got {c}")
        groups = fused.view(n, self.num_parts, self.group, h, w)
        coords = coord_channels(n, h, w, fused.dtype, fused.device)
        coords = coords.unsqueeze(1).expand(n, self.num_parts, 2, h, w)
        return torch.cat([groups, coords], dim=2).reshape(n, -1, h, w)

    def forward(self, fused):
        n, _, h, w = fused.shape
        out = self.out(self.tower(self.branch_inputs(fused)))
        return out.view(n, self.num_parts, 2, h, w)


class RFR(nn.Module):
    """Mask-attention refinement of the category-branch input.

    ``A_ij(x, y) = sigmoid(gain * (<f(x, y), f(i, j)> - margin))`` on
    channel-normalized mask features ``f``; the output is
    ``g + sum(A g) / sum(A)`` per cell.
    """

    def __init__(self, gain=1.0, margin=0.0):
        super().__init__()
        self.gain = gain
        self.margin = margin

    def attention(self, mask_feat):
        n, c, h, w = mask_feat.shape
        f = F.normalize(mask_feat.reshape(n, c, h * w), dim=1, eps=1e-12)
        sim = torch.bmm(f.transpose(1, 2), f)
        return torch.sigmoid(self.gain * (sim - self.margin))

    def forward(self, g, mask_feat):
        n, c, h, w = g.shape
        if mask_feat.shape[-2:] != g.shape[-2:]:
            raise ValueError("RFR inputs must share spatial size")
        att = self.attention(mask_feat)
        gf = g.reshape(n, c, h * w)
        pooled = torch.bmm(gf, att.transpose(1, 2)) / att.sum(dim=2).unsqueeze(1)
        return g + pooled.view(n, c, h, w)


class PartHead(nn.Module):
    """Category and kernel sub-heads, shared across pyramid levels."""

    def __init__(self, in_channels, channels, num_parts, kernel_channels, depth):
        super().__init__()
        self.cat_tower = _tower(in_channels + 2, channels, depth)
        self.cat_out = nn.Conv2d(channels, num_parts, 3, padding=1)
        self.kernel_tower = _tower(in_channels + 2, channels, depth)
        self.kernel_out = nn.Conv2d(channels, kernel_channels, 3, padding=1)
        nn.init.normal_(self.cat_out.weight, std=0.01)
        nn.init.constant_(self.cat_out.bias, -math.log((1 - PRIOR_PROB) / PRIOR_PROB))
        nn.init.zeros_(self.kernel_out.bias)

    def forward(self, level_feat, grid, rfr: Optional[RFR] = None, mask_feat=None):
        g = add_coords(resize(level_feat, grid))
        kernel = self.kernel_out(self.kernel_tower(g))
        cat_in = g
        if rfr is not None:
            cat_in = rfr(g, resize(mask_feat, grid))
        part = torch.sigmoid(self.cat_out(self.cat_tower(cat_in)))
        return part, kernel


class MaskFeature(nn.Module):
    """C1..C5 projected, resized to 1/4 resolution, summed, then mixed by one conv.

    With ``coords`` the mixing conv also sees the two coordinate channels, which
    lets one kernel separate instances that look alike.
    """

    def __init__(self, in_widths, kernel_channels, bias=True, coords=True):
        super().__init__()
        self.coords = coords
        self.proj = nn.ModuleList(nn.Conv2d(c, kernel_channels, 1, bias=bias) for c in in_widths)
        self.mix = nn.Conv2d(kernel_channels + 2 * coords, kernel_channels, 3, padding=1, bias=bias)

    def forward(self, stages, out_size):
        total = None
        for conv, x in zip(self.proj, stages):
            y = resize(conv(x), out_size)
            total = y if total is None else total + y
        total = F.relu(total)
        if self.coords:
            total = add_coords(total)
        return self.mix(total)


def dynamic_mask(kernel: torch.Tensor, mask_feat: torch.Tensor) -> torch.Tensor:
    """Soft masks from 1x1 dynamic kernels.

    kernel: (C_K,) or (n, C_K); mask_feat: (C_K, h, w). Returns (h, w) or (n, h, w).
    """
    single = kernel.dim() == 1
    k = kernel.unsqueeze(0) if single else kernel
    if k.shape[1] != mask_feat.shape[0]:
        raise ValueError(f"kernel length {k.shape[1]} != mask feature channels {mask_feat.shape[0]}")
    c, h, w = mask_feat.shape
    out = torch.sigmoid((k @ mask_feat.reshape(c, h * w)).view(-1, h, w))
    return out[0] if single else out


class MIR(nn.Module):
    """Mask-of-interest reclassification.

    ``features`` turns the fused feature into a map supervised by an auxiliary
    (C_P + 1)-way semantic head; ``classify`` pools a predicted mask's box
    region to ``roi_size`` squared and gates it by the pooled mask. With
    ``context`` > 0 the ungated feature over the box enlarged by that factor
    is pooled too and concatenated, so the classifier sees where the part sits
    on the body. A full-extent convolution and two fully connected layers
    produce the logits.
    """

    def __init__(self, in_channels, channels, num_parts, roi_size=14, hidden=128, context=0.0):
        super().__init__()
        self.roi_size = roi_size
        self.num_parts = num_parts
        self.context = context
        self.convs = nn.Sequential(ConvGN(in_channels, channels), ConvGN(channels, channels))
        self.aux = nn.Conv2d(channels, num_parts + 1, 1)
        self.compress = nn.Conv2d(channels * (2 if context else 1), hidden, roi_size)
        self.fc1 = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, num_parts)

    def features(self, fused):
        feat = self.convs(fused)
        return feat, self.aux(feat)

    @staticmethod
    def mask_boxes(masks: torch.Tensor) -> torch.Tensor:
        """Tight (x0, y0, x1, y1) boxes in pixel-edge coordinates, one per mask."""
        boxes = []
        for m in masks:
            ys = torch.nonzero(m.any(dim=1)).flatten()
            xs = torch.nonzero(m.any(dim=0)).flatten()
            if ys.numel() == 0:
                raise ValueError("MIR needs a nonempty mask")
            boxes.append([xs[0].item(), ys[0].item(), xs[-1].item() + 1, ys[-1].item() + 1])
        return torch.tensor(boxes, dtype=torch.float64)

    def classify(self, feat: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """feat: (C, Hf, Wf) for one image; masks: (n, H, W) bool. Returns (n, C_P) logits."""
        n = masks.shape[0]
        if n == 0:
            return feat.new_zeros((0, self.num_parts))
        H, W = masks.shape[-2:]
        boxes = self.mask_boxes(masks).to(feat.dtype)
        scale = feat.shape[-1] / W
        idx = torch.zeros((n, 1), dtype=feat.dtype)
        rois = roi_align(feat.unsqueeze(0), torch.cat([idx, boxes], dim=1), self.roi_size,
                         spatial_scale=scale, sampling_ratio=2, aligned=True)
        own = torch.arange(n, dtype=feat.dtype).unsqueeze(1)
        mrois = roi_align(masks.to(feat.dtype).unsqueeze(1), torch.cat([own, boxes], dim=1),
                          self.roi_size, spatial_scale=1.0, sampling_ratio=2, aligned=True)
        x = rois * mrois
        if self.context:
            ctr = (boxes[:, :2] + boxes[:, 2:]) / 2
            half = (boxes[:, 2:] - boxes[:, :2]) * self.context / 2
            wide = torch.cat([ctr - half, ctr + half], dim=1)
            x = torch.cat([x, roi_align(feat.unsqueeze(0), torch.cat([idx, wide], dim=1), self.roi_size,
                                        spatial_scale=scale, sampling_ratio=2, aligned=True)], dim=1)
        x = F.relu(self.compress(x)).flatten(1)
        return self.fc2(F.relu(self.fc1(x)))


@dataclass
class HeadOutputs:
    center: torch.Tensor
    offset: torch.Tensor
    part: list[torch.Tensor]
    kernel: list[torch.Tensor]
    mask_feat: torch.Tensor
    fused: Optional[torch.Tensor] = None
    mir_feat: Optional[torch.Tensor] = None
    mir_aux: Optional[torch.Tensor] = None

    def image(self, k: int) -> "HeadOutputs":
        """Outputs of batch element ``k`` (batch dimension kept)."""
        def sl(t):
            return None if t is None else t[k:k + 1]
        return HeadOutputs(sl(self.center), sl(self.offset), [sl(p) for p in self.part],
                           [sl(q) for q in self.kernel], sl(self.mask_feat), sl(self.fused),
                           sl(self.mir_feat), sl(self.mir_aux))


PARAM_GROUPS = ("backbone", "fusion", "center", "offset", "part_cat", "part_kernel", "mask_feat", "rfr", "mir")


class SMPNet(nn.Module):
    def __init__(self, cfg: ModelConfig, grid: GridSpec = GridSpec()):
        super().__init__()
        self.cfg = cfg
        self.grid_spec = grid
        w = cfg.backbone_widths
        self.backbone = Backbone(w)
        self.fusion = nn.ModuleDict({
            "fpn": FPN(w[1:], cfg.fpn_channels),
            "mix": Fusion(cfg.fpn_channels, 5, cfg.head_channels),
        })
        self.center = CenterHead(cfg.head_channels, cfg.tower_depth)
        self.offset = OffsetHead(cfg.head_channels, cfg.num_part_classes, cfg.tower_depth)
        part = PartHead(cfg.fpn_channels, cfg.head_channels, cfg.num_part_classes,
                        cfg.kernel_channels, cfg.tower_depth)
        # Registered under the two sub-head group names; a single module keeps the sharing explicit.
        self.part_cat = nn.ModuleDict({"tower": part.cat_tower, "out": part.cat_out})
        self.part_kernel = nn.ModuleDict({"tower": part.kernel_tower, "out": part.kernel_out})
        self._part = [part]
        self.mask_feat = MaskFeature(w, cfg.kernel_channels, coords=cfg.mask_coords)
        self.rfr = RFR(cfg.rfr_gain, cfg.rfr_margin) if cfg.rfr else None
        self.mir = MIR(cfg.head_channels, cfg.mir.channels, cfg.num_part_classes,
                       cfg.mir.roi_size, cfg.mir.hidden, cfg.mir.context)
        self.forward_count = 0

    @property
    def part_head(self) -> PartHead:
        return self._part[0]

    def param_groups(self) -> dict[str, list[str]]:
        groups = {g: [] for g in PARAM_GROUPS}
        for name, _ in self.named_parameters():
            groups[name.split(".")[0]].append(name)
        return groups

    def backbone_fpn(self, images):
        stages = self.backbone(images)
        levels = self.fusion["fpn"](stages[1:])
        return stages, levels

    def forward(self, images: torch.Tensor, with_mir: bool = False) -> HeadOutputs:
        self.forward_count += 1
        H, W = images.shape[-2:]
        stages, levels = self.backbone_fpn(images)
        S = self.grid_spec.human_grid
        fused = self.fusion["mix"](levels, S)
        fused_c = add_coords(fused)
        center = self.center(fused_c)
        offset = self.offset(fused)
        mask_feat = self.mask_feat(stages, (H // 4, W // 4))
        parts, kernels = [], []
        for lv, g in zip(levels, self.grid_spec.grids):
            p, k = self.part_head(lv, g, self.rfr, mask_feat)
            parts.append(p)
            kernels.append(k)
        out = HeadOutputs(center, offset, parts, kernels, mask_feat, fused=fused)
        if with_mir:
            out.mir_feat, out.mir_aux = self.mir.features(fused.detach())
        return out


# ---------------------------------------------------------------- checkpoints

def save_arrays(path, arrays: dict[str, np.ndarray], manifest: dict) -> Path:
    """Named-array archive (.npz) with a JSON manifest stored alongside the arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["format"] = CHECKPOINT_FORMAT
    manifest["arrays"] = [
        {"name": k, "shape": list(v.shape), "dtype": str(v.dtype)} for k, v in arrays.items()
    ]
    payload = dict(arrays)
    payload["__manifest__"] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__manifest__" not in data.files:
            raise ValueError(f"{path}: not a checkpoint archive (no manifest)")
        manifest = json.loads(data["__manifest__"].tobytes().decode())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
        arrays = {}
        for entry in manifest["arrays"]:
            arr = data[entry["name"]]
            if list(arr.shape) != entry["shape"] or str(arr.dtype) != entry["dtype"]:
                raise ValueError(f"{path}: array {entry['name']} does not match its manifest entry")
            arrays[entry["name"]] = arr
    return arrays, manifest


def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_state_arrays(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    model.load_state_dict(state, strict=True)


def save_model(model: SMPNet, path, extra: Optional[dict] = None) -> Path:
    from .config import Config, config_to_dict
    manifest = {"kind": "smp-model",
                "config": config_to_dict(Config(model=model.cfg, grid=model.grid_spec))}
    if extra:
        manifest.update(extra)
    return save_arrays(path, state_arrays(model), manifest)


def load_model(path, expect: Optional[ModelConfig] = None) -> SMPNet:
    """Rebuild a model from a checkpoint; ``expect`` guards against config mismatches."""
    from .config import config_from_dict
    arrays, manifest = load_arrays(path)
    if "config" not in manifest:
        raise ValueError(f"{path}: checkpoint has no embedded config")
    cfg = config_from_dict(manifest["config"])
    if expect is not None and expect.num_part_classes != cfg.model.num_part_classes:
        raise ValueError(
            f"checkpoint has {cfg.model.num_part_classes} part classes, config expects {expect.num_part_classes}")
    model = SMPNet(cfg.model, cfg.grid)
    prefix = "params/"
    params = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)} or arrays
    load_state_arrays(model, params)
    return model
