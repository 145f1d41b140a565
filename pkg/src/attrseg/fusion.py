"""Fusion of the two visual branches and the cosine cost volume."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import FusionStrategy
from .encoders import FeatureMap, TextEmbeddings

COS_EPS = 1e-8


class CostStage(enum.Enum):
    RAW = "raw"
    LIFTED = "lifted"
    SPATIAL_ENHANCED = "spatial"
    CLASS_ENHANCED = "class"


@dataclass
class CostVolume:
    """``tensor`` is ``(..., h, w, k)`` at the raw stage and ``(..., h, w, k, E)`` once enhanced."""

    tensor: torch.Tensor
    class_order: list[str]
    stage: CostStage = CostStage.RAW

    def __post_init__(self):
        axis = -1 if self.stage is CostStage.RAW else -2
        if self.tensor.shape[axis] != len(self.class_order):
            raise ValueError(f"class axis has {self.tensor.shape[axis]} entries for {len(self.class_order)} classes")


def resize_channels_last(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear (half-pixel centres) resize of a ``(..., h, w, C)`` tensor."""
    if tuple(x.shape[-3:-1]) == tuple(size):
        return x
    lead, (h, w, c) = x.shape[:-3], x.shape[-3:]
    y = x.reshape(-1, h, w, c).permute(0, 3, 1, 2)
    y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
    return y.permute(0, 2, 3, 1).reshape(*lead, *size, c)


def align_channels(f_s: FeatureMap, proj: nn.Linear, grid: tuple[int, int] | None = None) -> FeatureMap:
    if f_s.channels != proj.in_features:
        raise ValueError(f"SAM map has {f_s.channels} channels, projection expects {proj.in_features}")
    y = proj(f_s.tensor)
    if grid is not None:
        y = resize_channels_last(y, grid)
    return FeatureMap(y, f_s.level)


def _same_shape(a: FeatureMap, b: FeatureMap):
    if a.tensor.shape != b.tensor.shape:
        raise ValueError(f"cannot fuse maps of shape {tuple(a.tensor.shape)} and {tuple(b.tensor.shape)}")


def fuse(f_c: FeatureMap, f_s: FeatureMap, w: torch.Tensor | float) -> FeatureMap:
    _same_shape(f_c, f_s)
    return FeatureMap(w * f_c.tensor + (1 - w) * f_s.tensor, f_c.level)


def fuse_concat(f_c: FeatureMap, f_s: FeatureMap, mix: nn.Linear) -> FeatureMap:
    _same_shape(f_c, f_s)
    return FeatureMap(mix(torch.cat([f_c.tensor, f_s.tensor], dim=-1)), f_c.level)


class CrossAttention(nn.Module):
    """Single-head attention, CLIP pixels querying SAM pixels, added to CLIP."""

    def __init__(self, dim):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, f_c: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
        lead, (h, w, d) = f_c.shape[:-3], f_c.shape[-3:]
        c = f_c.reshape(-1, h * w, d)
        s = f_s.reshape(-1, h * w, d)
        att = (self.q(c) @ self.k(s).transpose(-2, -1) * d ** -0.5).softmax(-1)
        return f_c + self.out(att @ self.v(s)).reshape(*lead, h, w, d)


def fuse_attention(f_c: FeatureMap, f_s: FeatureMap, attn: CrossAttention) -> FeatureMap:
    _same_shape(f_c, f_s)
    return FeatureMap(attn(f_c.tensor, f_s.tensor), f_c.level)


class Fusion(nn.Module):
    """Per-tap channel alignment plus one of three fusion strategies.

    The weighted strategy shares a single unconstrained scalar ``w`` across
    tap levels; each level has its own SAM->CLIP projection.
    """

    def __init__(self, clip_dim: int, sam_dim: int, strategy: FusionStrategy = FusionStrategy.WEIGHTED,
                 init_weight: float = 0.5, levels: int = 3):
        super().__init__()
        self.strategy = FusionStrategy(strategy)
        self.w = nn.Parameter(torch.tensor(float(init_weight)))
        self.proj = nn.ModuleList(nn.Linear(sam_dim, clip_dim) for _ in range(levels))
        if self.strategy is FusionStrategy.CONCAT:
            self.mix = nn.ModuleList(nn.Linear(2 * clip_dim, clip_dim) for _ in range(levels))
        elif self.strategy is FusionStrategy.ATTENTION:
            self.cross = nn.ModuleList(CrossAttention(clip_dim) for _ in range(levels))

    def forward(self, clip_levels: list[FeatureMap], sam_levels: list[FeatureMap]) -> list[FeatureMap]:
        fused = []
        for i, (f_c, f_s) in enumerate(zip(clip_levels, sam_levels)):
            f_s = align_channels(f_s, self.proj[i], f_c.spatial)
            if self.strategy is FusionStrategy.WEIGHTED:
                fused.append(fuse(f_c, f_s, self.w))
            elif self.strategy is FusionStrategy.CONCAT:
                fused.append(fuse_concat(f_c, f_s, self.mix[i]))
            else:
                fused.append(fuse_attention(f_c, f_s, self.cross[i]))
        return fused


def cost_map(f: FeatureMap | torch.Tensor, t: TextEmbeddings | torch.Tensor, class_order: list[str] | None = None) -> CostVolume:
    """Cosine similarity of every pixel feature with every class embedding.

    A zero pixel vector yields 0 for all classes instead of NaN.
    """
    feats = f.tensor if isinstance(f, FeatureMap) else f
    if isinstance(t, TextEmbeddings):
        class_order = t.class_order
        t = t.matrix
    if class_order is None:
        class_order = [str(i) for i in range(t.shape[0])]
    if feats.shape[-1] != t.shape[-1]:
        raise ValueError(f"feature dim {feats.shape[-1]} != text dim {t.shape[-1]}")
    fn = feats / (feats.norm(dim=-1, keepdim=True) + COS_EPS)
    tn = t / (t.norm(dim=-1, keepdim=True) + COS_EPS)
    return CostVolume(fn @ tn.transpose(0, 1), list(class_order), CostStage.RAW)
