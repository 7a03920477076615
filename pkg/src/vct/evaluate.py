"""Evaluation drivers tying a trained model to the metric suite."""
from __future__ import annotations

import numpy as np
import torch

from .datasets import MiniScene, MiniShapes
from .losses import draw_swaps, swap_batch
from .manipulation import SlotProfile, extract_masks
from .metrics import ConceptPCA, ari, evaluate_disentanglement, label_map_to_masks, msc, table_representation
from .model import to_tensor

EVAL_SEED = 12345


@torch.no_grad()
def encode_images(model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = [model.encode(to_tensor(images[i:i + batch_size], dtype)).cpu().numpy()
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out).astype(np.float64)


def minishapes_tokens(model, dataset: MiniShapes, chunk: int = 2048) -> np.ndarray:
    """Concept tokens for every combination, in flat-index order."""
    parts = []
    for start in range(0, len(dataset), chunk):
        idx = np.arange(start, min(start + chunk, len(dataset)))
        parts.append(encode_images(model, dataset.render_index(idx)))
    return np.concatenate(parts)


def disentanglement_report(model, dataset: MiniShapes, seed: int = EVAL_SEED, pca_mode: str = "per_slot",
                           fast: bool = False, tokens: np.ndarray | None = None) -> dict[str, float]:
    tokens = minishapes_tokens(model, dataset) if tokens is None else tokens
    reps = ConceptPCA(mode=pca_mode).fit_transform(tokens)
    return evaluate_disentanglement(table_representation(reps, dataset.spec), dataset.spec, seed=seed, fast=fast)


VISIBLE_CHANGE = 0.1


@torch.no_grad()
def swap_identification(model, images: np.ndarray, seed: int = EVAL_SEED, batch_size: int = 32,
                        min_change: float = VISIBLE_CHANGE) -> dict[str, float]:
    """Held-out swap identification with fresh partners and slots.

    ``raw`` scores every swap. ``effective`` scores only swaps whose decoded
    image differs from the reconstruction by at least ``min_change`` at some
    pixel; a swap that changes nothing (an unused slot, or a partner sharing
    the slot's value) leaves no variation to identify.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    hits, hits_eff, n, n_eff = 0, 0, 0, 0
    for k, start in enumerate(range(0, len(images) - batch_size + 1, batch_size)):
        x = to_tensor(images[start:start + batch_size], dtype)
        c = model.encode(x)
        partners, slots = draw_swaps(len(x), c.shape[1], np.random.default_rng([seed, k]))
        x_a = model.decode_image(c)
        x_b = model.decode_image(swap_batch(c, partners, slots))
        tokens = model.tokenizer(model.image_tokens(torch.cat([x_a, x_b])))
        logits = torch.linalg.vector_norm(tokens[:len(x)] - tokens[len(x):], dim=-1)
        correct = (logits.argmax(-1) == slots).numpy()
        visible = ((x_b - x_a).abs().amax(dim=(1, 2, 3)) >= min_change).numpy()
        hits += int(correct.sum())
        n += len(x)
        hits_eff += int(correct[visible].sum())
        n_eff += int(visible.sum())
    return {
        "raw": hits / max(n, 1),
        "effective": hits_eff / n_eff if n_eff else float("nan"),
        "effective_fraction": n_eff / max(n, 1),
    }


def heldout_swap_accuracy(model, images: np.ndarray, seed: int = EVAL_SEED, batch_size: int = 32) -> float:
    """Effective-swap identification accuracy, see :func:`swap_identification`."""
    return swap_identification(model, images, seed, batch_size)["effective"]


def heldout_images(dataset, count: int = 1024, seed: int = EVAL_SEED) -> np.ndarray:
    rng = np.random.default_rng([seed, 99])
    if isinstance(dataset, MiniShapes):
        return dataset.render_batch(dataset.sample_labels(rng, count))
    images, _, _ = dataset.sample(rng, count)
    return images


def decomposition_report(model, scenes: MiniScene, seed: int = EVAL_SEED, count: int = 200,
                         profile_images: int = 1000, threshold: float = 0.05,
                         otsu: bool = False, keep: int = 0) -> dict:
    """Fit a slot profile, extract masks and score them against ground truth.

    The first ``keep`` scenes are returned under ``"examples"`` as
    ``(image, gt_label_map, assignment)`` triples for rendering overlays.
    """
    rng = np.random.default_rng([seed, 5])
    prof_imgs, _, _ = scenes.sample(rng, profile_images)
    profile = SlotProfile.fit(model, prof_imgs)
    images, gt, _ = scenes.sample(rng, count)
    aris, mscs, examples = [], [], []
    for img, g in zip(images, gt):
        masks, assignment = extract_masks(model, img, profile, threshold, otsu)
        if np.any(g > 0):
            aris.append(ari(assignment, g))
        gt_masks = label_map_to_masks(g)
        pred = np.concatenate([(assignment == 0)[None], masks])
        mscs.append(msc(pred, gt_masks))
        if len(examples) < keep:
            examples.append((img, g, assignment))
    out = {"ari": float(np.mean(aris)), "msc": float(np.mean(mscs))}
    if keep:
        out["examples"] = examples
    return out
