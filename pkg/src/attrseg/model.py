"""End-to-end segmentation model."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import Enhancement, FusionStrategy, ModelConfig
from .encoders import ClipImageEncoder, FeatureMap, SamImageEncoder, TextEmbeddings, TextEncoder, encode_text
from .enhance import (ClassEnhancer, SpatialEnhancer, UpsampleDecoder, class_enhance, lift_cost,
                      spatial_enhance, upsample_decode)
from .fusion import CostVolume, Fusion, cost_map, resize_channels_last
from .prompts import AttributeKind, ClassDescriptionSet


@dataclass
class Prediction:
    logits: torch.Tensor  # (..., H, W, k)
    class_order: list[str]
    cost: CostVolume | None = None


class SegModel(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), fusion_strategy=FusionStrategy.WEIGHTED,
                 enhancement=Enhancement.BOTH, seed: int = 0):
        super().__init__()
        self.config = config
        self.enhancement = Enhancement(enhancement)
        ec = config.enhancement
        d = config.clip.dim
        self.clip = ClipImageEncoder(config.clip)
        self.sam = SamImageEncoder(config.sam)
        self.text = TextEncoder(config.text, d)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.fusion = Fusion(d, config.sam.dim, fusion_strategy, config.init_weight)
            self.spatial = SpatialEnhancer(ec, d) if self.enhancement.spatial else None
            self.lift = None if self.enhancement.spatial else nn.Linear(1, ec.embed_dim)
            self.classwise = ClassEnhancer(ec, d) if self.enhancement.classwise else None
            self.decoder = UpsampleDecoder(ec, d)

    def encode_classes(self, bank: ClassDescriptionSet, class_order: list[str],
                       attribute: AttributeKind) -> TextEmbeddings:
        return encode_text(self.text, bank, class_order, attribute)

    def visual_features(self, images: torch.Tensor) -> list[FeatureMap]:
        images = images.to(self.clip.pos_embed.dtype)
        clip_levels = self.clip(images)
        sam_in = images
        s = self.config.sam.image_size
        if images.shape[-3:-1] != (s, s):
            sam_in = resize_channels_last(images, (s, s))
        return self.fusion(clip_levels, self.sam(sam_in))

    def forward(self, images: torch.Tensor, text: TextEmbeddings, keep_cost: bool = False) -> Prediction:
        """``images`` is ``(B, H, W, 3)`` in [0, 1]; returns logits ``(B, H, W, k)``."""
        fused = self.visual_features(images)
        tap1, tap2, last = fused
        e = cost_map(last, text)
        raw = e
        if self.spatial is not None:
            e = spatial_enhance(e, last, self.spatial)
        else:
            e = lift_cost(e, self.lift)
        if self.classwise is not None:
            e = class_enhance(e, text.matrix, self.classwise)
        logits = upsample_decode(e, [tap2, tap1], self.decoder, tuple(images.shape[-3:-1]))
        return Prediction(logits, text.class_order, raw if keep_cost else None)

    def predict(self, images: torch.Tensor, bank: ClassDescriptionSet, class_order: list[str],
                attribute: AttributeKind, keep_cost: bool = False) -> Prediction:
        with torch.no_grad():
            return self(images, self.encode_classes(bank, class_order, attribute), keep_cost)
