"""Run configuration: one flat YAML file per experiment, unknown keys rejected."""
from __future__ import annotations

import enum
from pathlib import Path

import yaml
from pydantic import BaseModel, ConfigDict, field_serializer, field_validator, model_validator

from .prompts import AttributeKind


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EncoderConfig(_Strict):
    image_size: int = 64
    patch_size: int = 8
    depth: int = 12
    heads: int = 4
    dim: int = 96
    tap_indices: tuple[int, int, int] = (4, 8, 12)
    mlp_ratio: int = 4
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        t = self.tap_indices
        if not (0 < t[0] < t[1] < t[2] == self.depth):
            raise ValueError(f"tap_indices must be strictly increasing and end at depth, got {t}")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


def sam_taps(depth: int) -> tuple[int, int, int]:
    return (depth - 2, depth - 1, depth)


class TextEncoderConfig(_Strict):
    vocab_size: int = 4096
    width: int = 64
    depth: int = 2
    heads: int = 4
    context_length: int = 77
    seed: int = 0


class FusionStrategy(str, enum.Enum):
    WEIGHTED = "weighted"
    CONCAT = "concat"
    ATTENTION = "attention"


class Enhancement(str, enum.Enum):
    NONE = "none"
    SPATIAL = "spatial"
    CLASS = "class"
    BOTH = "both"

    @property
    def spatial(self) -> bool:
        return self in (Enhancement.SPATIAL, Enhancement.BOTH)

    @property
    def classwise(self) -> bool:
        return self in (Enhancement.CLASS, Enhancement.BOTH)


class EnhancementConfig(_Strict):
    embed_dim: int = 32
    guidance_dim: int = 32
    window: int = 4
    heads: int = 4
    spatial_blocks: int = 1
    class_blocks: int = 1
    upsample_stages: int = 2
    decoder_dims: tuple[int, ...] = (32, 16)

    @model_validator(mode="after")
    def _check(self):
        for name in ("embed_dim", "guidance_dim", "window", "heads", "spatial_blocks", "class_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.upsample_stages < 0 or len(self.decoder_dims) < self.upsample_stages:
            raise ValueError("decoder_dims needs one entry per upsample stage")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        return self


CLIP_PARTS = {"q", "k", "v", "proj_all", "all", "none"}
SAM_PARTS = {"proj", "qkv", "all", "none"}
_CLIP_ORDER = ["q", "k", "v", "proj_all", "all", "none"]


class FreezePolicy(_Strict):
    clip_parts: frozenset[str] = frozenset({"q", "v"})
    sam_parts: frozenset[str] = frozenset({"proj", "qkv"})

    @field_validator("clip_parts")
    @classmethod
    def _clip(cls, v):
        bad = set(v) - CLIP_PARTS
        if bad:
            raise ValueError(f"unknown CLIP part(s): {sorted(bad)}")
        return frozenset(v)

    @field_validator("sam_parts")
    @classmethod
    def _sam(cls, v):
        bad = set(v) - SAM_PARTS
        if bad:
            raise ValueError(f"unknown SAM part(s): {sorted(bad)}")
        return frozenset(v)

    @field_serializer("clip_parts", "sam_parts")
    def _sorted(self, v):
        return sorted(v)

    @property
    def name(self) -> str:
        clip = sorted(self.clip_parts - {"none"}, key=_CLIP_ORDER.index)
        sam = sorted(self.sam_parts - {"none"})
        if not clip and not sam:
            return "Freeze"
        out = f"CLIP_{''.join(clip)}" if clip else ""
        if sam:
            out += (" " if out else "") + f"SAM_{','.join(sam)}"
        return out


FINETUNE_POLICIES: dict[str, FreezePolicy] = {
    "Freeze": FreezePolicy(clip_parts={"none"}, sam_parts={"none"}),
    "CLIP_qk": FreezePolicy(clip_parts={"q", "k"}, sam_parts={"none"}),
    "CLIP_kv": FreezePolicy(clip_parts={"k", "v"}, sam_parts={"none"}),
    "CLIP_qv": FreezePolicy(clip_parts={"q", "v"}, sam_parts={"none"}),
    "CLIP_qv SAM_proj": FreezePolicy(clip_parts={"q", "v"}, sam_parts={"proj"}),
    "CLIP_qv SAM_qkv": FreezePolicy(clip_parts={"q", "v"}, sam_parts={"qkv"}),
    "CLIP_qv SAM_proj,qkv": FreezePolicy(clip_parts={"q", "v"}, sam_parts={"proj", "qkv"}),
}


class TrainConfig(_Strict):
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 4
    iterations: int = 2000
    seed: int = 0
    attribute: AttributeKind = AttributeKind.COMPREHENSIVE
    fusion_strategy: FusionStrategy = FusionStrategy.WEIGHTED
    enhancement: Enhancement = Enhancement.BOTH
    policy: FreezePolicy = FreezePolicy()
    train_text_encoder: bool = True
    hflip: bool = True
    log_every: int = 50

    @model_validator(mode="after")
    def _check(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return self


class ModelConfig(_Strict):
    clip: EncoderConfig = EncoderConfig()
    sam: EncoderConfig = EncoderConfig(dim=128, tap_indices=(10, 11, 12), seed=1)
    text: TextEncoderConfig = TextEncoderConfig()
    enhancement: EnhancementConfig = EnhancementConfig()
    init_weight: float = 0.5

    @model_validator(mode="after")
    def _check(self):
        if self.sam.tap_indices != sam_taps(self.sam.depth):
            raise ValueError("SAM taps are the last three blocks")
        return self


class RunConfig(_Strict):
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    dataset_dir: str = "runs/data"
    bank_path: str = "runs/bank.tsv"
    output_dir: str = "runs/out"

    def dump(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dump())

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        data = yaml.safe_load(text) or {}
        return cls.model_validate(data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

