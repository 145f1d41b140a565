"""Synthetic attribute-controlled segmentation data and image/mask folder I/O.

Each synthetic class is a (colour, shape, texture) triple, so attribute
descriptions of a held-out class are built from words the seen classes also
use. Pixels not covered by an object carry the ignore label.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, model_validator

log = logging.getLogger(__name__)

IGNORE = 255

COLORS = {
    "red": (0.86, 0.18, 0.16),
    "blue": (0.16, 0.32, 0.86),
    "green": (0.18, 0.68, 0.24),
    "yellow": (0.90, 0.80, 0.15),
    "purple": (0.58, 0.22, 0.72),
}
SHAPES = ("circle", "square", "triangle", "ring")
TEXTURES = ("solid", "striped", "dotted")


class ClassSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    color: str
    shape: str
    texture: str

    @model_validator(mode="after")
    def _check(self):
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")
        return self


# Every colour and texture of the held-out hoop occurs in a seen class, and
# the seen classes are separable by colour plus one other attribute.
DEFAULT_CLASSES = (
    ClassSpec(name="disk", color="red", shape="circle", texture="striped"),
    ClassSpec(name="tile", color="blue", shape="square", texture="solid"),
    ClassSpec(name="wedge", color="blue", shape="triangle", texture="dotted"),
    ClassSpec(name="block", color="green", shape="square", texture="striped"),
    ClassSpec(name="hoop", color="blue", shape="ring", texture="striped"),
)


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    classes: tuple[ClassSpec, ...] = DEFAULT_CLASSES
    image_size: int = 64
    objects_per_image: tuple[int, int] = (2, 4)
    radius: tuple[float, float] = (9.0, 14.0)
    unseen: tuple[str, ...] = ("hoop",)
    seed: int = 0
    n_train: int = 400
    n_val: int = 100

    @model_validator(mode="after")
    def _check(self):
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        triples = [(c.color, c.shape, c.texture) for c in self.classes]
        if len(set(triples)) != len(triples):
            raise ValueError("class attribute triples must be pairwise distinct")
        if not set(self.unseen) < set(names):
            raise ValueError("unseen classes must be a proper subset of the classes")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError("objects_per_image must satisfy 1 <= min <= max")
        return self

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def seen(self) -> list[str]:
        return [c.name for c in self.classes if c.name not in self.unseen]


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], multiples of 1/255
    mask: np.ndarray  # (H, W) uint8 class indices, IGNORE for unlabeled
    id: str

    @property
    def fully_ignored(self) -> bool:
        return bool((self.mask == IGNORE).all())


@dataclass
class Split:
    name: str
    class_names: list[str]
    samples: list[Sample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples])

    def pixel_counts(self) -> np.ndarray:
        m = self.masks()
        return np.bincount(m[m != IGNORE].ravel(), minlength=len(self.class_names))[: len(self.class_names)]


class DatasetError(ValueError):
    pass


def _shape_mask(shape: str, yy, xx, cy, cx, r) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy**2 + dx**2 <= r**2
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        s = 0.85 * r
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    # upward triangle inscribed in the circle of radius r
    top, base = cy - r, cy + 0.6 * r
    half = (yy - top) / (base - top) * 0.95 * r
    return (yy >= top) & (yy <= base) & (np.abs(dx) <= half)


def _texture(texture: str, yy, xx, rng) -> np.ndarray:
    """Per-pixel brightness factor in (0, 1]."""
    if texture == "solid":
        return np.ones_like(yy, dtype=np.float64)
    if texture == "striped":
        theta = rng.choice([0.0, 0.25, 0.5, 0.75]) * np.pi
        phase = rng.uniform(0, 4)
        band = np.floor((xx * np.cos(theta) + yy * np.sin(theta) + phase) / 2.0) % 2
        return np.where(band == 0, 1.0, 0.4)
    oy, ox = rng.uniform(0, 4, size=2)
    dy = (yy + oy) % 4 - 2
    dx = (xx + ox) % 4 - 2
    return np.where(dy**2 + dx**2 <= 1.1**2, 0.35, 1.0)


def render_sample(spec: SyntheticSpec, rng: np.random.Generator, unseen_ignored: bool,
                  sample_id: str) -> tuple[Sample, int]:
    """Draw one image; also returns how many requested objects did not fit."""
    size = spec.image_size
    scale = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    bg = rng.uniform(0.15, 0.35)
    image = bg + rng.normal(0, 0.03, size=(size, size, 3))
    mask = np.full((size, size), IGNORE, dtype=np.uint8)

    wanted = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    placed: list[tuple[float, float, float]] = []
    for _ in range(wanted):
        r = rng.uniform(*spec.radius) * scale
        for _attempt in range(60):
            cy, cx = rng.uniform(r, size - r, size=2)
            if all((cy - py) ** 2 + (cx - px) ** 2 >= (r + pr + 1) ** 2 for py, px, pr in placed):
                break
        else:
            continue
        placed.append((cy, cx, r))
        idx = int(rng.integers(len(spec.classes)))
        cls = spec.classes[idx]
        region = _shape_mask(cls.shape, yy, xx, cy, cx, r)
        color = np.clip(np.array(COLORS[cls.color]) + rng.uniform(-0.06, 0.06, size=3), 0, 1)
        shade = _texture(cls.texture, yy, xx, rng)
        image[region] = shade[region, None] * color
        label = IGNORE if (unseen_ignored and cls.name in spec.unseen) else idx
        mask[region] = label
    image = np.round(np.clip(image, 0, 1) * 255) / 255
    return Sample(image.astype(np.float32), mask, sample_id), wanted - len(placed)


def generate_dataset(spec: SyntheticSpec, n_train: int | None = None, n_val: int | None = None) -> tuple[Split, Split]:
    """Deterministic train/val splits; unseen classes are ignore-labelled in train only."""
    n_train = spec.n_train if n_train is None else n_train
    n_val = spec.n_val if n_val is None else n_val
    if n_train <= 0 or n_val <= 0:
        raise ValueError("n_train and n_val must be positive")
    rng = np.random.default_rng(spec.seed)
    names = spec.class_names
    splits = []
    for name, n, ignore_unseen in (("train", n_train, True), ("val", n_val, False)):
        split, dropped = Split(name, names), 0
        for i in range(n):
            sample, missing = render_sample(spec, rng, ignore_unseen, f"{name}_{i:05d}")
            split.samples.append(sample)
            dropped += missing
        if dropped:
            log.warning("%s: %d requested objects did not fit and were dropped", name, dropped)
        splits.append(split)
    train, val = splits
    for split in splits:
        counts = split.pixel_counts()
        log.info("%s pixel counts: %s", split.name, dict(zip(names, counts.tolist())))
    return train, val


def write_dataset(root: str | Path, splits: list[Split], spec: SyntheticSpec | None = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    names = splits[0].class_names
    (root / "classes.txt").write_text("".join(f"{n}\n" for n in names))
    for split in splits:
        for s in split.samples:
            Image.fromarray(np.round(s.image * 255).astype(np.uint8), "RGB").save(root / "images" / f"{s.id}.png")
            Image.fromarray(s.mask, "L").save(root / "masks" / f"{s.id}.png")
    meta = {split.name: [s.id for s in split.samples] for split in splits}
    if spec is not None:
        meta["spec"] = spec.model_dump(mode="json")
        meta["seed"] = spec.seed
    (root / "split.json").write_text(json.dumps(meta, indent=2))
    return root


def read_classes(path: str | Path) -> list[str]:
    names = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    if len(set(names)) != len(names):
        raise DatasetError(f"{path}: duplicate class names")
    return names


def load_external(images_dir: str | Path, masks_dir: str | Path, classes_file: str | Path,
                  ids: list[str] | None = None, name: str = "external") -> Split:
    """Read RGB images and single-channel index masks paired by file stem.

    Every problem found is collected and reported together.
    """
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    names = read_classes(classes_file)
    k = len(names)
    if ids is None:
        ids = sorted(p.stem for p in images_dir.iterdir() if p.is_file())
    errors, samples = [], []
    for stem in ids:
        img_path = _find(images_dir, stem)
        mask_path = _find(masks_dir, stem)
        if img_path is None:
            errors.append(f"{stem}: image not found in {images_dir}")
            continue
        if mask_path is None:
            errors.append(f"{img_path.name}: no mask with matching stem in {masks_dir}")
            continue
        with Image.open(mask_path) as m:
            if m.mode not in ("L", "P", "I", "I;16"):
                errors.append(f"{mask_path.name}: mask must be single-channel integer, got mode {m.mode}")
                continue
            mask = np.array(m)
        bad = np.unique(mask[(mask != IGNORE) & ((mask < 0) | (mask >= k))])
        if bad.size:
            errors.append(f"{mask_path.name}: class index {bad.tolist()} out of range for {k} classes")
            continue
        with Image.open(img_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255
        if image.shape[:2] != mask.shape:
            errors.append(f"{mask_path.name}: mask shape {mask.shape} != image shape {image.shape[:2]}")
            continue
        sample = Sample(image, mask.astype(np.uint8), stem)
        if sample.fully_ignored:
            log.warning("%s: mask is fully ignored", mask_path.name)
        samples.append(sample)
    if errors:
        raise DatasetError("; ".join(errors))
    return Split(name, names, samples)


def _find(directory: Path, stem: str) -> Path | None:
    for ext in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"):
        p = directory / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def load_dataset(root: str | Path) -> dict[str, Split]:
    """Load every split listed in ``split.json`` under `root`."""
    root = Path(root)
    meta = json.loads((root / "split.json").read_text())
    splits = {}
    for key, ids in meta.items():
        if key in ("spec", "seed"):
            continue
        splits[key] = load_external(root / "images", root / "masks", root / "classes.txt", ids=ids, name=key)
    return splits


def slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-") or "class"
