"""mIoU evaluation with a seen/unseen breakdown, and cost-map heatmap export."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import IGNORE, slugify


def predict_labels(logits) -> np.ndarray:
    """Arg-max over the class axis; ties go to the lowest class index."""
    arr = logits.detach().cpu().numpy() if hasattr(logits, "detach") else np.asarray(logits)
    return np.argmax(arr, axis=-1)


@dataclass
class IoUReport:
    class_order: list[str]
    per_class_iou: dict[str, float | None]
    miou: float
    seen_miou: float | None
    unseen_miou: float | None
    seen: list[str]
    unseen: list[str]
    confusion_counts: list[list[int]]
    pixel_counts: dict[str, int]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "IoUReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        """Aligned text table: seen classes, their mean, unseen classes, their mean."""
        cols = [*self.seen, "mIoU(seen)", *self.unseen, "mIoU(unseen)", "mIoU"]
        vals = [self.per_class_iou[c] for c in self.seen] + [self.seen_miou]
        vals += [self.per_class_iou[c] for c in self.unseen] + [self.unseen_miou, self.miou]
        cells = ["-" if v is None else f"{100 * v:.1f}" for v in vals]
        widths = [max(len(c), len(v)) for c, v in zip(cols, cells)]
        head = " | ".join(c.rjust(w) for c, w in zip(cols, widths))
        body = " | ".join(v.rjust(w) for v, w in zip(cells, widths))
        return f"{head}\n{'-' * len(head)}\n{body}\n"


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, k: int, ignore: int = IGNORE) -> np.ndarray:
    """Rows are ground truth, columns predictions; ignored pixels are dropped."""
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    keep = gt != ignore
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= k):
        raise ValueError(f"ground-truth label outside [0, {k}) and not the ignore value")
    if p.size and (p.min() < 0 or p.max() >= k):
        raise ValueError(f"predicted label outside [0, {k})")
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def compute_miou(preds, gts, class_order: list[str], seen: set[str] | list[str] | None = None,
                 ignore: int = IGNORE) -> IoUReport:
    """Dataset-level IoU from one confusion matrix accumulated over all images.

    Classes with an empty union are undefined and left out of every mean.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    k = len(class_order)
    conf = np.zeros((k, k), dtype=np.int64)
    for p, g in zip(preds, gts):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"prediction shape {np.shape(p)} != ground-truth shape {np.shape(g)}")
        conf += confusion_matrix(p, g, k, ignore)
    if conf.sum() == 0:
        raise ValueError("no evaluable pixels")
    inter = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - inter
    iou = {c: (float(inter[i] / union[i]) if union[i] else None) for i, c in enumerate(class_order)}

    seen_list = [c for c in class_order if seen is None or c in seen]
    unseen_list = [c for c in class_order if c not in seen_list]

    def _mean(names):
        vals = [iou[c] for c in names if iou[c] is not None]
        return float(np.mean(vals)) if vals else None

    return IoUReport(
        class_order=list(class_order),
        per_class_iou=iou,
        miou=_mean(class_order),
        seen_miou=_mean(seen_list),
        unseen_miou=_mean(unseen_list),
        seen=seen_list,
        unseen=unseen_list,
        confusion_counts=conf.tolist(),
        pixel_counts={c: int(n) for c, n in zip(class_order, conf.sum(1))},
    )


def random_baseline_iou(pixel_counts: dict[str, int] | np.ndarray) -> dict[str, float] | np.ndarray:
    """Expected IoU of a predictor that draws each pixel's label from the label frequencies.

    With class frequency ``p`` the expected intersection is ``p**2`` and the
    union ``2p - p**2`` (per pixel), so the IoU is ``p / (2 - p)``.
    """
    if isinstance(pixel_counts, dict):
        names = list(pixel_counts)
        out = random_baseline_iou(np.array([pixel_counts[n] for n in names], dtype=np.float64))
        return dict(zip(names, out.tolist()))
    counts = np.asarray(pixel_counts, dtype=np.float64)
    p = counts / counts.sum()
    return p / (2 - p)


def export_costmap_heatmaps(volume, class_names: list[str], out_dir: str | Path,
                            size: tuple[int, int] | None = None) -> list[Path]:
    """Write one grayscale PNG per class slice of a raw ``(h, w, k)`` cost volume.

    Each slice is min-max scaled on its own; the bounds go to ``ranges.txt``.
    """
    arr = volume.tensor if hasattr(volume, "tensor") else volume
    arr = arr.detach().cpu().numpy() if hasattr(arr, "detach") else np.asarray(arr)
    if arr.ndim != 3 or arr.shape[-1] != len(class_names):
        raise ValueError(f"expected an (h, w, {len(class_names)}) volume, got shape {arr.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, lines = [], ["class\tfile\tmin\tmax\tnote"]
    for n, name in enumerate(class_names):
        sl = arr[..., n].astype(np.float64)
        lo, hi = float(sl.min()), float(sl.max())
        if hi > lo:
            img = np.round((sl - lo) / (hi - lo) * 255).astype(np.uint8)
            note = ""
        else:
            img = np.full(sl.shape, 128, dtype=np.uint8)
            note = "degenerate range"
        path = out_dir / f"{n:02d}_{slugify(name)}.png"
        pil = Image.fromarray(img, "L")
        if size is not None:
            pil = pil.resize((size[1], size[0]), Image.NEAREST)
        pil.save(path)
        written.append(path)
        lines.append(f"{name}\t{path.name}\t{lo!r}\t{hi!r}\t{note}")
    sidecar = out_dir / "ranges.txt"
    sidecar.write_text("\n".join(lines) + "\n")
    written.append(sidecar)
    return written
