"""Small vision transformers and a text transformer standing in for the
CLIP/SAM image encoders and the CLIP text encoder.

The two image branches differ only in how their attention projections are
parameterised, which is what the fine-tuning policies address: the CLIP-like
branch has separate ``q``, ``k``, ``v`` and ``out`` linears, the SAM-like
branch a fused ``qkv`` linear and an output ``proj``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig, TextEncoderConfig, sam_taps
from .prompts import AttributeKind, ClassDescriptionSet
from .tokenizer import tokenize


class TapLevel(enum.Enum):
    TAP1 = 1
    TAP2 = 2
    TAP_LAST = 3


@dataclass
class FeatureMap:
    """Channel-last feature map, shape ``(..., h, w, D)``."""

    tensor: torch.Tensor
    level: TapLevel = TapLevel.TAP_LAST

    @property
    def spatial(self) -> tuple[int, int]:
        return tuple(self.tensor.shape[-3:-1])

    @property
    def channels(self) -> int:
        return self.tensor.shape[-1]


@dataclass
class TextEmbeddings:
    matrix: torch.Tensor  # (k, D)
    class_order: list[str]
    bank_hash: str = ""

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.class_order):
            raise ValueError("row count must equal the number of classes")
        if len(set(self.class_order)) != len(self.class_order):
            raise ValueError("duplicate class in class_order")


def _split_heads(x, heads):
    b, n, d = x.shape
    return x.view(b, n, heads, d // heads).transpose(1, 2)


def _merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


def attention(q, k, v, heads, mask=None):
    q, k, v = (_split_heads(t, heads) for t in (q, k, v))
    scores = q @ k.transpose(-2, -1) * q.shape[-1] ** -0.5
    if mask is not None:
        scores = scores.masked_fill(mask, float("-inf"))
    return _merge_heads(scores.softmax(dim=-1) @ v)


class ClipAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        return self.out(attention(self.q(x), self.k(x), self.v(x), self.heads, mask))


class SamAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.proj(attention(q, k, v, self.heads, mask))


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, attn_cls):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = attn_cls(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio)

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


def _seeded_init(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    for name, p in module.named_parameters():
        with torch.no_grad():
            if name.endswith("bias"):
                p.zero_()
            elif "norm" in name:
                p.fill_(1.0)
            elif p.dim() >= 2 and "embed" not in name:
                fan_in = p[0].numel()
                p.normal_(0.0, fan_in ** -0.5, generator=g)
            else:
                p.normal_(0.0, 0.02, generator=g)


class ViTEncoder(nn.Module):
    """Constant-resolution ViT returning channel-last maps at three tap layers."""

    def __init__(self, config: EncoderConfig, attn_cls):
        super().__init__()
        self.config = config
        d, g = config.dim, config.grid
        self.patch_embed = nn.Conv2d(3, d, config.patch_size, stride=config.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g, d))
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio, attn_cls) for _ in range(config.depth))
        self.tap_norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(3))
        _seeded_init(self, config.seed)

    def forward(self, image: torch.Tensor) -> list[FeatureMap]:
        size = self.config.image_size
        if image.shape[-3:] != (size, size, 3):
            raise ValueError(f"expected image of shape (..., {size}, {size}, 3), got {tuple(image.shape)}")
        lead = image.shape[:-3]
        x = image.reshape(-1, size, size, 3).permute(0, 3, 1, 2)
        x = self.patch_embed((x - 0.5) / 0.25)
        b, d, gh, gw = x.shape
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        taps = []
        for i, blk in enumerate(self.blocks, 1):
            x = blk(x)
            if i in self.config.tap_indices:
                level = TapLevel(len(taps) + 1)
                y = self.tap_norms[len(taps)](x).reshape(*lead, gh, gw, d)
                taps.append(FeatureMap(y, level))
        return taps


class ClipImageEncoder(ViTEncoder):
    def __init__(self, config: EncoderConfig):
        super().__init__(config, ClipAttention)


class SamImageEncoder(ViTEncoder):
    def __init__(self, config: EncoderConfig):
        if config.tap_indices != sam_taps(config.depth):
            config = config.model_copy(update={"tap_indices": sam_taps(config.depth)})
        super().__init__(config, SamAttention)


class TextEncoder(nn.Module):
    """Causal transformer over hashed word tokens, pooled at the end token."""

    def __init__(self, config: TextEncoderConfig, embed_dim: int):
        super().__init__()
        self.config = config
        w = config.width
        self.token_embed = nn.Embedding(config.vocab_size, w)
        self.pos_embed = nn.Parameter(torch.zeros(config.context_length, w))
        self.blocks = nn.ModuleList(Block(w, config.heads, 4, ClipAttention) for _ in range(config.depth))
        self.norm_final = nn.LayerNorm(w)
        self.text_projection = nn.Linear(w, embed_dim, bias=False)
        _seeded_init(self, config.seed)

    def forward(self, texts: list[str]) -> torch.Tensor:
        ids, eot = tokenize(texts, self.config.vocab_size, self.config.context_length)
        n = ids.shape[1]
        x = self.token_embed(ids) + self.pos_embed[:n]
        mask = torch.ones(n, n, dtype=torch.bool).triu(1)
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.norm_final(x[torch.arange(len(texts)), eot])
        return self.text_projection(x)


def encode_text(encoder: TextEncoder, descriptions: ClassDescriptionSet, class_order: list[str],
                attribute: AttributeKind) -> TextEmbeddings:
    texts = descriptions.texts(class_order, attribute)
    return TextEmbeddings(encoder(texts), list(class_order), descriptions.bank_hash)


def _as_image(image) -> torch.Tensor:
    if not isinstance(image, torch.Tensor):
        image = torch.as_tensor(image)
    return image


def encode_image_clip(image, encoder: ClipImageEncoder) -> list[FeatureMap]:
    image = _as_image(image).to(encoder.pos_embed.dtype)
    return encoder(image)


def encode_image_sam(image, encoder: SamImageEncoder) -> list[FeatureMap]:
    image = _as_image(image).to(encoder.pos_embed.dtype)
    return encoder(image)
