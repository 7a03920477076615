"""Concept-token surgery on a trained model: swaps, recombination, interpolation, masks.

Masks come from mean-token ablation: the saliency of slot ``k`` at a pixel is
how much the decoded image changes there when token ``k`` is replaced by its
dataset-mean value.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .losses import swap_tokens
from .model import to_tensor


def _as_batch(x) -> torch.Tensor:
    """Accept ``(H, W, 3)``/``(B, H, W, 3)`` arrays or ``(B, 3, H, W)`` tensors."""
    if isinstance(x, torch.Tensor):
        return x if x.dim() == 4 else x.unsqueeze(0)
    arr = np.asarray(x)
    return to_tensor(arr[None] if arr.ndim == 3 else arr)


@torch.no_grad()
def encode(model, x) -> torch.Tensor:
    x = _as_batch(x).to(next(model.parameters()).dtype)
    return model.encode(x)


@torch.no_grad()
def decode(model, c: torch.Tensor) -> torch.Tensor:
    return model.decode_image(c if c.dim() == 3 else c.unsqueeze(0))


@torch.no_grad()
def swap_and_decode(model, x_a, x_b, slot: int) -> torch.Tensor:
    """Decode ``x_a``'s tokens with row ``slot`` taken from ``x_b``."""
    c_a, c_b = encode(model, x_a), encode(model, x_b)
    return decode(model, swap_tokens(c_a, c_b, slot))


@torch.no_grad()
def recombine(model, token_sets: torch.Tensor, assignment) -> torch.Tensor:
    """Assemble one token set row-by-row from ``token_sets[assignment[k]]`` and decode once."""
    token_sets = torch.as_tensor(token_sets)
    s, m, _ = token_sets.shape
    assignment = list(assignment)
    if len(assignment) != m:
        raise ValueError(f"assignment must name a source for each of the {m} slots, got {len(assignment)}")
    if any(not 0 <= a < s for a in assignment):
        raise IndexError(f"assignment sources must lie in [0, {s})")
    rows = torch.stack([token_sets[a, k] for k, a in enumerate(assignment)])
    return decode(model, rows)


@torch.no_grad()
def interpolate_slot(model, c: torch.Tensor, slot: int, target: torch.Tensor, steps: int = 10) -> torch.Tensor:
    """Decode ``c`` with row ``slot`` moved linearly to ``target``; ``(steps, 3, H, W)``."""
    if steps < 2:
        raise ValueError("need at least 2 interpolation steps")
    c = c if c.dim() == 2 else c[0]
    ts = torch.linspace(0, 1, steps, dtype=c.dtype)
    batch = c.unsqueeze(0).repeat(steps, 1, 1)
    # Endpoints are assigned exactly so t=0/1 reproduce the originals bit-for-bit.
    for i, t in enumerate(ts):
        if i == 0:
            continue
        batch[i, slot] = target if i == steps - 1 else (1 - t) * c[slot] + t * target
    return decode(model, batch)


@dataclass
class SlotProfile:
    mean_tokens: torch.Tensor      # (M, D)
    activity: np.ndarray           # (M,) mean token distance from the slot mean
    num_images: int

    @classmethod
    @torch.no_grad()
    def fit(cls, model, images, batch_size: int = 256, min_images: int = 1000) -> "SlotProfile":
        images = np.asarray(images) if not isinstance(images, torch.Tensor) else images
        n = len(images)
        if n < min_images:
            raise ValueError(f"slot profile needs >= {min_images} images, got {n}")
        tokens = torch.cat([encode(model, images[i:i + batch_size]) for i in range(0, n, batch_size)])
        mean = tokens.mean(0)
        activity = (tokens - mean).norm(dim=-1).mean(0).cpu().numpy()
        return cls(mean, activity, n)


def otsu_threshold(values: np.ndarray, bins: int = 64) -> float:
    """Split maximising between-class variance; ties resolve to the middle of the plateau."""
    hist, edges = np.histogram(values, bins=bins)
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)[:-1]
    w1 = hist.sum() - w0
    s0 = np.cumsum(hist * centers)[:-1]
    m0 = s0 / np.maximum(w0, 1)
    m1 = (np.sum(hist * centers) - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    best = np.flatnonzero(between >= between.max() * (1 - 1e-12))
    # split k puts bins 0..k below the threshold
    return float(edges[best[len(best) // 2] + 1])


@torch.no_grad()
def slot_saliency(model, x, profile: SlotProfile) -> np.ndarray:
    """``(M, H, W)`` per-slot saliency of one image."""
    if profile is None:
        raise ValueError("slot profile has not been fitted")
    c = encode(model, x)[0]
    m = c.shape[0]
    batch = c.unsqueeze(0).repeat(m + 1, 1, 1)
    for k in range(m):
        batch[k + 1, k] = profile.mean_tokens[k]
    imgs = decode(model, batch)
    diff = (imgs[1:] - imgs[:1]).abs().sum(dim=1)
    return diff.cpu().numpy()


def extract_masks(model, x, profile: SlotProfile, threshold: float = 0.05,
                  otsu: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot binary masks ``(M, H, W)`` and an assignment map (0 = background, k+1 = slot k)."""
    sal = slot_saliency(model, x, profile)
    best = sal.max(axis=0)
    tau = otsu_threshold(best) if otsu else threshold
    owner = sal.argmax(axis=0) + 1
    assignment = np.where(best > tau, owner, 0).astype(np.int64)
    masks = np.stack([assignment == k + 1 for k in range(sal.shape[0])])
    return masks, assignment
