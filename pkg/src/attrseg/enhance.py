"""Cost-volume enhancement and decoding.

Spatial stage: every class slice of the volume is an independent image of
``embed_dim`` tokens, refined by windowed self-attention whose queries and
keys also see the visual guidance. Class stage: every pixel is an unordered
set of class tokens, refined by linear attention whose queries and keys also
see the class text embedding. No positional information is attached to
classes, so both stages are equivariant to class permutations.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EnhancementConfig
from .encoders import FeatureMap, Mlp, _merge_heads, _split_heads
from .fusion import CostStage, CostVolume


def _zero_residual(block):
    # residual branches start silent so the raw cost passes through untouched at init
    for layer in (block.out, block.mlp.fc2):
        nn.init.zeros_(layer.weight)
        nn.init.zeros_(layer.bias)


class WindowAttentionBlock(nn.Module):
    def __init__(self, dim, guide_dim, heads, window):
        super().__init__()
        self.heads, self.window = heads, window
        self.norm1 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim + guide_dim, dim)
        self.k = nn.Linear(dim + guide_dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, 2 * dim)
        _zero_residual(self)

    def forward(self, x, guide):
        # x: (N, h, w, dim), guide: (N, h, w, guide_dim)
        n, h, w, d = x.shape
        ws = self.window
        ph, pw = -h % ws, -w % ws
        y = self.norm1(x)
        qk_in = torch.cat([y, guide], dim=-1)
        q, k, v = self.q(qk_in), self.k(qk_in), self.v(y)
        valid = torch.ones(1, h, w, 1, dtype=torch.bool)
        if ph or pw:
            q, k, v = (F.pad(t, (0, 0, 0, pw, 0, ph)) for t in (q, k, v))
            valid = F.pad(valid, (0, 0, 0, pw, 0, ph), value=False)
        q, k, v = (_windows(t, ws) for t in (q, k, v))
        keep = _windows(valid, ws)[..., 0]  # (nW, ws*ws)
        qh, kh, vh = (_split_heads(t, self.heads) for t in (q, k, v))
        scores = qh @ kh.transpose(-2, -1) * qh.shape[-1] ** -0.5
        nwin = keep.shape[0]
        scores = scores.view(n, nwin, self.heads, ws * ws, ws * ws)
        scores = scores.masked_fill(~keep[None, :, None, None, :], float("-inf"))
        att = scores.view(n * nwin, self.heads, ws * ws, ws * ws).softmax(-1)
        out = _merge_heads(att @ vh)
        out = _unwindows(out, n, h + ph, w + pw, ws)[:, :h, :w]
        x = x + self.out(out)
        return x + self.mlp(self.norm2(x))


def _windows(x, ws):
    n, h, w, c = x.shape
    x = x.view(n, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, c)


def _unwindows(x, n, h, w, ws):
    c = x.shape[-1]
    x = x.view(n, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, w, c)


def elu_feature(x):
    return F.elu(x) + 1


class LinearAttentionBlock(nn.Module):
    def __init__(self, dim, guide_dim, heads, eps=1e-6):
        super().__init__()
        self.heads, self.eps = heads, eps
        self.norm1 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim + guide_dim, dim)
        self.k = nn.Linear(dim + guide_dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, 2 * dim)
        _zero_residual(self)

    def forward(self, x, guide):
        # x: (N, k, dim), guide: (k, guide_dim)
        y = self.norm1(x)
        qk_in = torch.cat([y, guide.expand(x.shape[0], -1, -1)], dim=-1)
        q = _split_heads(elu_feature(self.q(qk_in)), self.heads)
        k = _split_heads(elu_feature(self.k(qk_in)), self.heads)
        v = _split_heads(self.v(y), self.heads)
        kv = k.transpose(-2, -1) @ v  # (N, H, dh, dh)
        norm = q @ k.sum(dim=-2, keepdim=True).transpose(-2, -1)  # (N, H, k, 1)
        out = _merge_heads((q @ kv) / (norm + self.eps))
        x = x + self.out(out)
        return x + self.mlp(self.norm2(x))


class SpatialEnhancer(nn.Module):
    def __init__(self, config: EnhancementConfig, guide_in: int):
        super().__init__()
        self.lift = nn.Linear(1, config.embed_dim)
        self.guide = nn.Linear(guide_in, config.guidance_dim)
        self.blocks = nn.ModuleList(
            WindowAttentionBlock(config.embed_dim, config.guidance_dim, config.heads, config.window)
            for _ in range(config.spatial_blocks))


class ClassEnhancer(nn.Module):
    def __init__(self, config: EnhancementConfig, text_dim: int):
        super().__init__()
        self.text = nn.Linear(text_dim, config.guidance_dim)
        self.blocks = nn.ModuleList(
            LinearAttentionBlock(config.embed_dim, config.guidance_dim, config.heads)
            for _ in range(config.class_blocks))


def lift_cost(e: CostVolume, lift: nn.Linear) -> CostVolume:
    if e.stage is not CostStage.RAW:
        raise ValueError("only a raw cost volume can be lifted")
    return CostVolume(lift(e.tensor.unsqueeze(-1)), e.class_order, CostStage.LIFTED)


def spatial_enhance(e: CostVolume, guidance: FeatureMap, enhancer: SpatialEnhancer) -> CostVolume:
    """Lift raw costs to tokens and refine each class slice with windowed attention.

    Input ``(B, h, w, k)``, output ``(B, h, w, k, E)``.
    """
    x = e.tensor
    if x.shape[-3:-1] != guidance.tensor.shape[-3:-1]:
        raise ValueError(f"cost volume grid {tuple(x.shape[-3:-1])} != guidance grid {guidance.spatial}")
    b, h, w, k = x.shape
    x = enhancer.lift(x.unsqueeze(-1))  # (b, h, w, k, E)
    x = x.permute(0, 3, 1, 2, 4).reshape(b * k, h, w, -1)
    g = enhancer.guide(guidance.tensor)
    g = g.unsqueeze(1).expand(b, k, h, w, g.shape[-1]).reshape(b * k, h, w, -1)
    for blk in enhancer.blocks:
        x = blk(x, g)
    x = x.view(b, k, h, w, -1).permute(0, 2, 3, 1, 4)
    return CostVolume(x, e.class_order, CostStage.SPATIAL_ENHANCED)


def class_enhance(e: CostVolume, text: torch.Tensor, enhancer: ClassEnhancer) -> CostVolume:
    """Refine each pixel's set of class tokens with text-conditioned linear attention."""
    x = e.tensor
    b, h, w, k, d = x.shape
    if text.shape[0] != k:
        raise ValueError(f"{text.shape[0]} text embeddings for {k} classes")
    t = enhancer.text(text)
    x = x.reshape(b * h * w, k, d)
    for blk in enhancer.blocks:
        x = blk(x, t)
    return CostVolume(x.view(b, h, w, k, d), e.class_order, CostStage.CLASS_ENHANCED)


class UpsampleDecoder(nn.Module):
    """Per-class decoder: repeated 2x upsampling with visual guidance, then a logit head.

    Guidance maps live on the encoder grid; each stage projects its map with a
    transposed convolution whose kernel equals the stride, landing exactly on
    the stage's resolution (learned sub-patch detail instead of plain
    interpolation).
    """

    def __init__(self, config: EnhancementConfig, guide_in: int):
        super().__init__()
        self.stages = config.upsample_stages
        dims = [config.embed_dim, *config.decoder_dims[: self.stages]]
        self.guides = nn.ModuleList()
        self.refine = nn.ModuleList()
        for s in range(self.stages):
            scale = 2 ** (s + 1)
            self.guides.append(nn.ConvTranspose2d(guide_in, dims[s + 1], scale, stride=scale))
            self.refine.append(nn.Sequential(
                nn.Conv2d(dims[s] + dims[s + 1], dims[s + 1], 3, padding=1), nn.GELU(),
                nn.Conv2d(dims[s + 1], dims[s + 1], 3, padding=1), nn.GELU(),
            ))
        self.head = nn.Conv2d(dims[-1], 1, 1)

    def forward(self, x: torch.Tensor, guidance: list[torch.Tensor], out_size: tuple[int, int]) -> torch.Tensor:
        # x: (B, h, w, k, E) -> logits (B, H, W, k)
        b, h, w, k, d = x.shape
        y = x.permute(0, 3, 4, 1, 2).reshape(b * k, d, h, w)
        for s in range(self.stages):
            y = F.interpolate(y, scale_factor=2, mode="bilinear", align_corners=False)
            g = guidance[s].permute(0, 3, 1, 2)
            g = self.guides[s](g)
            if g.shape[-2:] != y.shape[-2:]:
                g = F.interpolate(g, size=y.shape[-2:], mode="bilinear", align_corners=False)
            g = g.unsqueeze(1).expand(b, k, *g.shape[1:]).reshape(b * k, *g.shape[1:])
            y = self.refine[s](torch.cat([y, g], dim=1))
        y = self.head(y).view(b, k, *y.shape[-2:])
        y = F.interpolate(y, size=out_size, mode="bilinear", align_corners=False)
        return y.permute(0, 2, 3, 1)


def upsample_decode(e: CostVolume, guidance_levels: list[FeatureMap], decoder: UpsampleDecoder,
                    out_size: tuple[int, int]) -> torch.Tensor:
    if decoder.stages > 0 and len(guidance_levels) < decoder.stages:
        raise ValueError(f"{decoder.stages} upsample stages need as many guidance maps, got {len(guidance_levels)}")
    return decoder(e.tensor, [g.tensor for g in guidance_levels], out_size)

