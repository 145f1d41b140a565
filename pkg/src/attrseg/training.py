"""Binary cross-entropy training with selective encoder fine-tuning."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import FreezePolicy, ModelConfig, TrainConfig
from .data import IGNORE, Split
from .metrics import IoUReport, compute_miou, predict_labels
from .model import SegModel
from .prompts import AttributeKind, ClassDescriptionSet

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ATSGCKPT"


class TrainingDiverged(RuntimeError):
    pass


class BankMismatch(RuntimeError):
    pass


def bce_loss(logits: torch.Tensor, labels: torch.Tensor, ignore: int = IGNORE) -> torch.Tensor:
    """Mean per-class sigmoid BCE over every (non-ignored pixel, class) pair.

    `logits` is ``(..., H, W, k)``, `labels` ``(..., H, W)`` with class
    indices or `ignore`. Targets are one-hot along the class axis.
    """
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    valid = labels != ignore
    if not bool(valid.any()):
        raise ValueError("every pixel is ignored; the loss is undefined")
    x = logits[valid]
    target = F.one_hot(labels[valid].long(), logits.shape[-1]).to(x.dtype)
    return F.binary_cross_entropy_with_logits(x, target, reduction="mean")


def _clip_part(name: str) -> str | None:
    # clip.blocks.N.attn.{q,k,v,out}.{weight,bias}
    parts = name.split(".")
    if len(parts) >= 5 and parts[1] == "blocks" and parts[3] == "attn":
        return parts[4]
    return None


def _sam_part(name: str) -> str | None:
    parts = name.split(".")
    if len(parts) >= 5 and parts[1] == "blocks" and parts[3] == "attn":
        return parts[4]
    return None


def _encoder_trainable(name: str, policy: FreezePolicy) -> bool:
    if name.startswith("clip."):
        parts = set(policy.clip_parts)
        if "all" in parts:
            return True
        if "proj_all" in parts:
            parts |= {"q", "k", "v", "out"}
        return _clip_part(name) in parts
    if name.startswith("sam."):
        parts = set(policy.sam_parts)
        return "all" in parts or _sam_part(name) in parts
    raise AssertionError(name)


def build_param_groups(model: SegModel, policy: FreezePolicy, weight_decay: float = 1e-4,
                       train_text_encoder: bool = True) -> list[dict]:
    """Mark parameters trainable per `policy` and return AdamW parameter groups.

    Heads (fusion, enhancement, decoder, text projection) always train. The
    fusion weight ``w`` gets no weight decay. Frozen tensors get
    ``requires_grad=False`` and appear in no group.
    """
    if not isinstance(policy, FreezePolicy):
        policy = FreezePolicy.model_validate(policy)
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if name.startswith(("clip.", "sam.")):
            trainable = _encoder_trainable(name, policy)
        elif name.startswith("text."):
            trainable = train_text_encoder or name.startswith("text.text_projection")
        else:
            trainable = True
        p.requires_grad_(trainable)
        if trainable:
            (no_decay if name == "fusion.w" else decay).append(p)
    groups = [{"params": decay, "weight_decay": weight_decay, "name": "decay"}]
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0, "name": "no_decay"})
    return groups


@dataclass
class Checkpoint:
    state_dict: dict[str, torch.Tensor]
    header: dict
    loss_log: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def bank_hash(self) -> str:
        return self.header["bank_hash"]

    def save(self, path: str | Path) -> None:
        """Layout: magic, u64 header length, UTF-8 JSON header, torch-serialised weights."""
        buf = io.BytesIO()
        torch.save(self.state_dict, buf)
        head = json.dumps(self.header, sort_keys=True).encode("utf-8")
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:8] != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + n].decode("utf-8"))
        state = torch.load(io.BytesIO(raw[16 + n:]), weights_only=True)
        return cls(state, header)

    def build_model(self) -> SegModel:
        h = self.header
        train_cfg = TrainConfig.model_validate(h["train_config"])
        model = SegModel(ModelConfig.model_validate(h["model_config"]), train_cfg.fusion_strategy,
                         train_cfg.enhancement, seed=train_cfg.seed)
        model.load_state_dict(self.state_dict)
        return model.eval()


def write_loss_csv(path: str | Path, rows: list[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "loss", "w"])
        for it, loss, w in rows:
            wr.writerow([it, repr(loss), repr(w)])


def remap_labels(masks: np.ndarray, all_classes: list[str], class_order: list[str]) -> np.ndarray:
    """Map dataset indices onto positions in `class_order`; other classes become ignore."""
    lut = np.full(256, IGNORE, dtype=np.uint8)
    for i, name in enumerate(all_classes):
        if name in class_order:
            lut[i] = class_order.index(name)
    return lut[masks]


def train(model_config: ModelConfig, config: TrainConfig, dataset: Split, bank: ClassDescriptionSet,
          class_order: list[str] | None = None, loss_csv: str | Path | None = None,
          model: SegModel | None = None) -> Checkpoint:
    """Optimise a fresh model (or `model`) on `dataset` and return a checkpoint.

    `class_order` is the training vocabulary, by default every class that has
    at least one labelled pixel. Reproducible from (config, bank, data).
    """
    torch.manual_seed(config.seed)
    if model is None:
        model = SegModel(model_config, config.fusion_strategy, config.enhancement, seed=config.seed)
    model.train()
    if class_order is None:
        counts = dataset.pixel_counts()
        class_order = [c for c, n in zip(dataset.class_names, counts) if n > 0]
    bank.subset(class_order, config.attribute)  # fail fast on missing descriptions

    images = torch.from_numpy(dataset.images())
    labels = torch.from_numpy(remap_labels(dataset.masks(), dataset.class_names, class_order).astype(np.int64))
    groups = build_param_groups(model, config.policy, config.weight_decay, config.train_text_encoder)
    opt = torch.optim.AdamW(groups, lr=config.lr)
    rng = np.random.default_rng(config.seed)

    rows: list[tuple[int, float, float]] = []
    order = np.empty(0, dtype=np.int64)
    for it in range(1, config.iterations + 1):
        if order.size < config.batch_size:
            order = np.concatenate([order, rng.permutation(len(dataset))])
        idx, order = order[: config.batch_size], order[config.batch_size:]
        x, y = images[idx], labels[idx]
        if config.hflip:
            flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
            x = torch.where(flip[:, None, None, None], x.flip(2), x)
            y = torch.where(flip[:, None, None], y.flip(2), y)
        text = model.encode_classes(bank, class_order, config.attribute)
        pred = model(x, text)
        loss = bce_loss(pred.logits, y)
        w = float(model.fusion.w.detach())
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(f"non-finite loss at iteration {it} (lr={config.lr}, w={w})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rows.append((it, loss.item(), w))
        if config.log_every and it % config.log_every == 0:
            recent = np.mean([r[1] for r in rows[-config.log_every:]])
            log.info("iter %d loss %.4f w %.4f", it, recent, w)

    if loss_csv is not None:
        write_loss_csv(loss_csv, rows)
    header = {
        "model_config": model_config.model_dump(mode="json"),
        "train_config": config.model_dump(mode="json"),
        "bank_hash": bank.bank_hash,
        "class_order": list(class_order),
        "iteration": config.iterations,
        "w": float(model.fusion.w.detach()),
        "metrics": {"final_loss": rows[-1][1] if rows else None},
    }
    model.eval()
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(state, header, rows)


def evaluate(model: SegModel, split: Split, bank: ClassDescriptionSet, attribute: AttributeKind,
             class_order: list[str] | None = None, seen: list[str] | None = None,
             batch_size: int = 16) -> IoUReport:
    """Predict every image of `split` against `class_order` and score it."""
    class_order = class_order or split.class_names
    model.eval()
    text = None
    preds = []
    with torch.no_grad():
        text = model.encode_classes(bank, class_order, attribute)
        images = torch.from_numpy(split.images())
        for i in range(0, len(split), batch_size):
            preds.extend(predict_labels(model(images[i:i + batch_size], text).logits))
    gts = list(remap_labels(split.masks(), split.class_names, class_order))
    return compute_miou(preds, gts, class_order, seen)


def check_bank(checkpoint: Checkpoint, bank: ClassDescriptionSet) -> None:
    if checkpoint.bank_hash != bank.bank_hash:
        raise BankMismatch(
            f"prompt bank mismatch: checkpoint was trained with {checkpoint.bank_hash}, "
            f"supplied bank is {bank.bank_hash}")
