"""Command-line entry point: ``attrseg <command> [options]``.

Every command that trains or evaluates reads one flat YAML run config and
echoes the resolved config into its output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from pydantic import ValidationError

from .config import FINETUNE_POLICIES, Enhancement, FusionStrategy, RunConfig
from .data import SyntheticSpec, generate_dataset, load_dataset, read_classes, write_dataset
from .metrics import export_costmap_heatmaps, random_baseline_iou
from .prompts import AttributeKind, ClassDescriptionSet, DescriptionError, FixtureClient, HTTPClient, generate_descriptions
from .training import BankMismatch, Checkpoint, check_bank, evaluate, train

log = logging.getLogger("attrseg")

AXES = ("prompt", "fusion", "enhancement", "finetune")

PROMPT_ROWS = [
    ("NameOnly", AttributeKind.NAME_ONLY),
    ("Color", AttributeKind.COLOR),
    ("Shape/Size", AttributeKind.SHAPE_SIZE),
    ("Texture/Material", AttributeKind.TEXTURE_MATERIAL),
    ("Comprehensive", AttributeKind.COMPREHENSIVE),
]
FUSION_ROWS = [("Concat", FusionStrategy.CONCAT), ("Attn", FusionStrategy.ATTENTION),
               ("Weighted", FusionStrategy.WEIGHTED)]
ENHANCEMENT_ROWS = [("None", Enhancement.NONE), ("Spatial-level", Enhancement.SPATIAL),
                    ("Class-level", Enhancement.CLASS), ("Spatial+Class", Enhancement.BOTH)]
FINETUNE_ROWS = [(name, policy) for name, policy in FINETUNE_POLICIES.items()]


class CLIError(Exception):
    pass


def _load_config(path: str) -> RunConfig:
    try:
        return RunConfig.load(path)
    except FileNotFoundError:
        raise CLIError(f"config file not found: {path}") from None
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first["loc"])
        raise CLIError(f"invalid config {path}: {loc}: {first['msg']}") from None
    except Exception as exc:
        raise CLIError(f"cannot parse config {path}: {exc}") from None


def _load_bank(path: str) -> ClassDescriptionSet:
    if not Path(path).exists():
        raise CLIError(f"prompt bank not found: {path}")
    return ClassDescriptionSet.load(path)


def _splits(cfg: RunConfig):
    root = Path(cfg.dataset_dir)
    if not (root / "split.json").exists():
        raise CLIError(f"no dataset at {root} (run make-dataset first)")
    return load_dataset(root), json.loads((root / "split.json").read_text())


def _seen(root_meta: dict, class_names: list[str]) -> list[str]:
    spec = root_meta.get("spec")
    unseen = set(spec["unseen"]) if spec else set()
    return [c for c in class_names if c not in unseen]


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    return out


def cmd_generate_prompts(args) -> int:
    names = read_classes(args.classes)
    attrs = [AttributeKind(a) for a in args.attribute]
    if args.client == "http":
        if not args.base_url:
            raise CLIError("--client http needs --base-url")
        client = HTTPClient(args.base_url, model=args.model)
    else:
        client = FixtureClient()
    for attr in attrs:
        bank = generate_descriptions(names, attr, client, args.cache)
        log.info("%s: %d descriptions", attr.value, len(bank))
    print(ClassDescriptionSet.load(args.cache).bank_hash)
    return 0


def cmd_make_dataset(args) -> int:
    spec = SyntheticSpec(seed=args.seed, image_size=args.image_size, n_train=args.n_train, n_val=args.n_val)
    splits = generate_dataset(spec)
    root = write_dataset(args.out, list(splits), spec)
    print(root)
    return 0


def run_training(cfg: RunConfig, out: Path) -> Checkpoint:
    splits, meta = _splits(cfg)
    bank = _load_bank(cfg.bank_path)
    train_split = splits["train"]
    seen = _seen(meta, train_split.class_names)
    ckpt = train(cfg.model, cfg.train, train_split, bank, class_order=seen, loss_csv=out / "loss.csv")
    ckpt.save(out / "model.ckpt")
    return ckpt


def run_eval(cfg: RunConfig, ckpt: Checkpoint, out: Path, split_name: str = "val"):
    splits, meta = _splits(cfg)
    bank = _load_bank(cfg.bank_path)
    check_bank(ckpt, bank)
    if split_name not in splits:
        raise CLIError(f"dataset has no split {split_name!r}")
    split = splits[split_name]
    seen = _seen(meta, split.class_names)
    attr = AttributeKind(ckpt.header["train_config"]["attribute"])
    report = evaluate(ckpt.build_model(), split, bank, attr, split.class_names, seen)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.table())
    (out / "baseline.json").write_text(json.dumps(random_baseline_iou(report.pixel_counts), indent=2))
    return report


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = _out(cfg)
    ckpt = run_training(cfg, out)
    print(f"{out / 'model.ckpt'} final loss {ckpt.header['metrics']['final_loss']:.4f} w {ckpt.header['w']:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    out = _out(cfg)
    ckpt_path = Path(args.checkpoint or out / "model.ckpt")
    if not ckpt_path.exists():
        raise CLIError(f"checkpoint not found: {ckpt_path}")
    report = run_eval(cfg, Checkpoint.load(ckpt_path), out, args.split)
    print(report.table(), end="")
    return 0


def cmd_visualize(args) -> int:
    cfg = _load_config(args.config)
    out = _out(cfg)
    ckpt = Checkpoint.load(args.checkpoint or out / "model.ckpt")
    bank = _load_bank(cfg.bank_path)
    check_bank(ckpt, bank)
    if not Path(args.image).exists():
        raise CLIError(f"image not found: {args.image}")
    model = ckpt.build_model()
    size = cfg.model.clip.image_size
    with Image.open(args.image) as im:
        arr = np.asarray(im.convert("RGB").resize((size, size), Image.BILINEAR), dtype=np.float32) / 255
    classes = read_classes(args.classes) if args.classes else _splits(cfg)[0]["val"].class_names
    attr = AttributeKind(ckpt.header["train_config"]["attribute"])
    pred = model.predict(torch.from_numpy(arr)[None], bank, classes, attr, keep_cost=True)
    cost = pred.cost.tensor[0]
    target = Path(args.out or out / "heatmaps" / Path(args.image).stem)
    files = export_costmap_heatmaps(cost, classes, target, size=(size, size))
    print(f"{len(files) - 1} heatmaps in {target}")
    return 0


def ablation_rows(axis: str):
    """(row label, config override) pairs for one ablation axis."""
    if axis == "prompt":
        return [(label, {"attribute": a}) for label, a in PROMPT_ROWS]
    if axis == "fusion":
        return [(label, {"fusion_strategy": f}) for label, f in FUSION_ROWS]
    if axis == "enhancement":
        return [(label, {"enhancement": e}) for label, e in ENHANCEMENT_ROWS]
    if axis == "finetune":
        return [(label, {"policy": p}) for label, p in FINETUNE_ROWS]
    raise CLIError(f"unknown ablation axis {axis!r}")


def _ablation_run(cfg: RunConfig, label: str, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    ckpt = run_training(cfg, out)
    report = run_eval(cfg, ckpt, out)
    return {"method": label, "seen": report.seen_miou, "unseen": report.unseen_miou, "miou": report.miou,
            "w": ckpt.header["w"]}


def format_ablation_table(rows: list[dict]) -> str:
    """One row per run; ``avg.`` averages the evaluated splits (here only val)."""
    cols = ["Methods", "mIoU(seen)", "mIoU(unseen)", "mIoU", "avg."]
    body = []
    for r in rows:
        cells = [r["seen"], r["unseen"], r["miou"], r["miou"]]
        body.append([r["method"]] + ["-" if v is None else f"{100 * v:.2f}" for v in cells])
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = [" | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cols, widths)))]
    lines.append("-" * len(lines[0]))
    for b in body:
        lines.append(" | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(b, widths))))
    return "\n".join(lines) + "\n"


def ablate(cfg: RunConfig, axis: str, iterations: int | None = None, parallel: int = 0) -> tuple[list[dict], str]:
    out = Path(cfg.output_dir) / f"ablate_{axis}"
    jobs = []
    for i, (label, override) in enumerate(ablation_rows(axis)):
        train_cfg = cfg.train.model_copy(update=override)
        if iterations is not None:
            train_cfg = train_cfg.model_copy(update={"iterations": iterations})
        train_cfg = type(cfg.train).model_validate(train_cfg.model_dump())
        run_cfg = cfg.model_copy(update={"train": train_cfg, "output_dir": str(out / f"{i:02d}")})
        jobs.append((run_cfg, label, out / f"{i:02d}"))
    if parallel > 1:
        with ProcessPoolExecutor(parallel) as pool:
            rows = list(pool.map(_ablation_run, *zip(*jobs)))
    else:
        rows = [_ablation_run(*job) for job in jobs]
    table = format_ablation_table(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(table)
    (out / "table.json").write_text(json.dumps(rows, indent=2))
    return rows, table


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    _out(cfg)
    for axis in AXES if args.axis == "all" else [args.axis]:
        _, table = ablate(cfg, axis, args.iterations, args.parallel)
        print(f"[{axis}]\n{table}")
    return 0


def cmd_init_config(args) -> int:
    text = RunConfig().dump()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attrseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-prompts", help="fill the prompt bank with class descriptions")
    g.add_argument("--classes", required=True, help="text file, one class name per line")
    g.add_argument("--attribute", nargs="+", required=True, choices=[a.value for a in AttributeKind])
    g.add_argument("--client", choices=["fixture", "http"], default="fixture")
    g.add_argument("--cache", required=True, help="prompt bank TSV (created or extended)")
    g.add_argument("--base-url", help="OpenAI-compatible endpoint for --client http")
    g.add_argument("--model", default="gpt-3.5-turbo")
    g.set_defaults(func=cmd_generate_prompts)

    m = sub.add_parser("make-dataset", help="render the synthetic dataset to disk")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--image-size", type=int, default=64)
    m.add_argument("--n-train", type=int, default=400)
    m.add_argument("--n-val", type=int, default=100)
    m.set_defaults(func=cmd_make_dataset)

    i = sub.add_parser("init-config", help="print the default run config")
    i.add_argument("--out")
    i.set_defaults(func=cmd_init_config)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="val")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="write per-class cost-map heatmaps for one image")
    v.add_argument("--config", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--checkpoint")
    v.add_argument("--classes", help="class list file; defaults to the dataset classes")
    v.add_argument("--out")
    v.set_defaults(func=cmd_visualize)

    a = sub.add_parser("ablate", help="train and evaluate one run per value of an ablation axis")
    a.add_argument("--config", required=True)
    a.add_argument("--axis", choices=[*AXES, "all"], required=True)
    a.add_argument("--iterations", type=int, default=None, help="override the iteration count of every run")
    a.add_argument("--parallel", type=int, default=0, help="worker processes (default: serial)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, BankMismatch, DescriptionError, FileNotFoundError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
