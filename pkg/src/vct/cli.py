"""Command-line experiment runner.

Exit codes: 0 success, 1 usage or input error, 2 numeric failure.
Every artifact is named ``{config-hash}-{seed}-...`` so outputs of different
configurations never collide.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError
from .config import ExperimentConfig, parse_kv
from .datasets import MiniScene, MiniShapes, export_dataset, to_uint8
from .evaluate import (EVAL_SEED, decomposition_report, disentanglement_report, heldout_images,
                       swap_identification)
from .gradcheck import run_gradcheck
from .manipulation import decode, encode, interpolate_slot
from .metrics import write_report
from .model import to_images, to_tensor
from .nn import NumericError
from .train import Trainer, build_dataset, load_model

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
SCENE_POOL = 1000
GRADCHECK_TOL = 1e-4

logger = logging.getLogger("vct")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def save_image(path: Path, image: np.ndarray) -> Path:
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path)
    return path


def save_labels(path: Path, labels: np.ndarray) -> Path:
    from PIL import Image

    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)
    return path


def tile(images: np.ndarray, rows: int, cols: int, pad: int = 1) -> np.ndarray:
    """Arrange ``rows * cols`` images ``(H, W, 3)`` row-major into one canvas."""
    h, w = images.shape[1:3]
    canvas = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, 3))
    for k, img in enumerate(images):
        r, c = divmod(k, cols)
        canvas[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = img
    return canvas


def palette(n: int) -> np.ndarray:
    from .datasets import hue_rgb

    return np.stack([np.zeros(3)] + [hue_rgb(k / max(n, 1), 0.8, 0.9) for k in range(n)])


def load_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    raw = parse_kv(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    return ExperimentConfig.from_dict(raw)


def prefix(cfg: ExperimentConfig) -> str:
    return f"{cfg.hash()}-{cfg.seed}"


def pool_images(cfg: ExperimentConfig, dataset, indices) -> np.ndarray:
    """Images addressable by index: MiniShapes combinations or a seeded scene pool."""
    indices = [int(i) for i in indices]
    size = len(dataset) if isinstance(dataset, MiniShapes) else SCENE_POOL
    bad = [i for i in indices if not 0 <= i < size]
    if bad:
        raise UsageError(f"image indices out of range [0, {size}): {bad}")
    if isinstance(dataset, MiniShapes):
        return dataset.render_index(np.asarray(indices))
    pool = heldout_images(dataset, SCENE_POOL, seed=cfg.seed)
    return pool[indices]


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _pairs(text: str) -> list[tuple[int, int]]:
    pairs = []
    for item in text.split(","):
        try:
            i, j = item.split(":")
            pairs.append((int(i), int(j)))
        except ValueError:
            raise UsageError(f"pairs look like 'i:j,i:j', got {item!r}") from None
    return pairs


def _check_slots(slots, m):
    bad = [s for s in slots if not 0 <= s < m]
    if bad:
        raise UsageError(f"slot indices out of range [0, {m}): {bad}")


# verbs

def cmd_train(args) -> int:
    overrides = args.set + ([f"steps={args.steps}"] if args.steps is not None else [])
    if args.resume and not args.config and not overrides:
        cfg = ExperimentConfig.from_text(Checkpoint.load(args.resume).config_text)
    else:
        cfg = load_config(args.config, overrides)
    out = Path(args.out)
    if args.resume:
        ckpt = Checkpoint.load(args.resume, expected_hash=cfg.hash(), force=args.force)
        trainer = Trainer.resume(ckpt, cfg, out_dir=out, force=args.force)
    else:
        trainer = Trainer(cfg, out_dir=out)
    print(f"config_hash = {cfg.hash()}")
    print("step,rec,dis,total,swap_accuracy,lr")
    trainer.run(until=args.until, log=None if args.quiet else print)
    print(f"checkpoint = {out / (prefix(cfg) + '-latest.ckpt')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, _ = load_model(args.checkpoint, force=args.force)
    dataset_name = args.dataset or cfg.dataset
    if dataset_name != cfg.dataset:
        raise UsageError(f"checkpoint was trained on {cfg.dataset}, not {dataset_name}")
    dataset = build_dataset(cfg)
    images = heldout_images(dataset, args.swap_images)
    with torch.no_grad():
        x = to_tensor(images)
        rec = float(torch.mean((model.decode_image(model.encode(x)) - x) ** 2))
    swaps = swap_identification(model, images)
    report = {"rec_mse": rec, "swap_accuracy": swaps["effective"], "swap_accuracy_raw": swaps["raw"],
              "swap_effective_fraction": swaps["effective_fraction"]}
    if isinstance(dataset, MiniShapes):
        report.update(disentanglement_report(model, dataset, seed=EVAL_SEED, pca_mode=args.pca_mode, fast=args.fast))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{prefix(cfg)}-eval.txt"
    write_report(path, report, cfg.seed, cfg.hash())
    for k, v in report.items():
        print(f"{k} = {v:.6f}")
    print(f"report = {path}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    model, cfg, _ = load_model(args.checkpoint, force=args.force)
    if cfg.dataset != "miniscene":
        raise UsageError("decompose needs a checkpoint trained on miniscene")
    scenes = MiniScene(cfg.image_size, cfg.min_objects, cfg.max_objects)
    result = decomposition_report(model, scenes, count=args.count, threshold=args.threshold,
                                  otsu=args.otsu, keep=args.overlays)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pre = prefix(cfg)
    colors = palette(cfg.num_concepts)
    for k, (img, gt, assignment) in enumerate(result.pop("examples", [])):
        gt_rgb = colors[np.minimum(gt, len(colors) - 1)]
        pred_rgb = colors[assignment]
        save_image(out / f"{pre}-overlay-{k}.png", tile(np.stack([img, gt_rgb, 0.5 * img + 0.5 * pred_rgb]), 1, 3))
        save_labels(out / f"{pre}-mask-{k}.png", assignment)
    path = out / f"{pre}-decompose.txt"
    write_report(path, result, cfg.seed, cfg.hash())
    for k, v in result.items():
        print(f"{k} = {v:.6f}")
    print(f"report = {path}")
    return EXIT_OK


def cmd_swap(args) -> int:
    model, cfg, _ = load_model(args.checkpoint, force=args.force)
    pairs = _pairs(args.pairs)
    slots = _int_list(args.slots)
    _check_slots(slots, cfg.num_concepts)
    dataset = build_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pre = prefix(cfg)
    flat = sorted({i for p in pairs for i in p})
    images = dict(zip(flat, pool_images(cfg, dataset, flat)))
    tokens = {i: encode(model, images[i])[0] for i in flat}
    cells = []
    for slot in slots:
        for i, j in pairs:
            c = tokens[i].clone()
            c[slot] = tokens[j][slot]
            img = to_images(decode(model, c))[0]
            save_image(out / f"{pre}-swap-{i}-{j}-{slot}.png", img)
            cells.append(img)
    grid = out / f"{pre}-swap-grid.png"
    save_image(grid, tile(np.stack(cells), len(slots), len(pairs)))
    print(f"grid = {grid} ({len(slots)} x {len(pairs)})")
    return EXIT_OK


def cmd_interp(args) -> int:
    model, cfg, _ = load_model(args.checkpoint, force=args.force)
    _check_slots([args.slot], cfg.num_concepts)
    dataset = build_dataset(cfg)
    src, dst = pool_images(cfg, dataset, [args.index, args.target])
    c, target = encode(model, src)[0], encode(model, dst)[0]
    frames = to_images(interpolate_slot(model, c, args.slot, target[args.slot], args.frames))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{prefix(cfg)}-interp-{args.index}-{args.target}-{args.slot}.png"
    save_image(path, tile(frames, 1, len(frames)))
    print(f"strip = {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.set)
    result = run_gradcheck(seed=cfg.seed, probes=args.probes)
    lines = result.lines()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{prefix(cfg)}-gradcheck.txt"
    path.write_text(f"config_hash = {cfg.hash()}\n" + "\n".join(lines) + "\n")
    print("\n".join(lines))
    ok = (result.worst < GRADCHECK_TOL and result.zero_outside_tokenizer
          and result.nonzero_in_detokenizer_without_detach)
    print("gradcheck " + ("PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_render_dataset(args) -> int:
    cfg = load_config(args.config, args.set)
    dataset = build_dataset(cfg)
    out = Path(args.out)
    export_dataset(dataset, out, seed=cfg.seed, count=args.count, extra={"config_hash": cfg.hash()})
    preview = pool_images(cfg, dataset, range(min(16, len(dataset) if isinstance(dataset, MiniShapes) else 16)))
    save_image(out / f"{prefix(cfg)}-preview.png", tile(preview, 2, len(preview) // 2))
    print(f"dataset = {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vct", description="Visual concept tokenizer experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def with_config(p, required=False):
        p.add_argument("--config", required=required, help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    def with_checkpoint(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--force", action="store_true", help="ignore config hash mismatches")

    p = sub.add_parser("train", help="train or resume a model")
    with_config(p)
    p.add_argument("--out", default="runs")
    p.add_argument("--steps", type=int, help="shorthand for --set steps=N")
    p.add_argument("--until", type=int, help="stop at this step without changing the schedule")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="disentanglement metrics and swap accuracy")
    with_checkpoint(p)
    p.add_argument("--dataset", choices=["minishapes", "miniscene"])
    p.add_argument("--out", default="reports")
    p.add_argument("--pca-mode", default="per_slot", choices=["per_slot", "concat"])
    p.add_argument("--swap-images", type=int, default=1024)
    p.add_argument("--fast", action="store_true", help="smaller metric sample sizes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decompose", help="scene masks, ARI and MSC")
    with_checkpoint(p)
    p.add_argument("--out", default="reports")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--otsu", action="store_true")
    p.add_argument("--overlays", type=int, default=8)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("swap", help="swap concept slots between image pairs")
    with_checkpoint(p)
    p.add_argument("--pairs", required=True, help="i:j,i:j (slot taken from j into i)")
    p.add_argument("--slots", required=True, help="comma-separated slot indices")
    p.add_argument("--out", default="figures")
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("interp", help="interpolate one slot towards another image's token")
    with_checkpoint(p)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--slot", type=int, required=True)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--out", default="figures")
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all gradient paths")
    with_config(p)
    p.add_argument("--probes", type=int, default=4, help="probed entries per parameter tensor")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render-dataset", help="export a procedural dataset to disk")
    with_config(p)
    p.add_argument("--count", type=int)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_render_dataset)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
