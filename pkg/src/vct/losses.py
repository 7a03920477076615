"""Reconstruction loss, token swapping and the concept disentangling loss.

The disentangling loss swaps one concept token between two images, decodes
both token sets, re-encodes the decoded images and asks, via cross-entropy over
the per-token change norms, which slot was swapped. By default the decoded
images are detached and the re-encoding runs the image tokenizer without
gradient, so the loss only reaches the concept tokenizer (and its prototypes).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .nn import check_finite, cross_entropy


@dataclass
class LossReport:
    rec: torch.Tensor
    dis: torch.Tensor
    total: torch.Tensor
    swap_accuracy: float
    lambda_dis: float

    def as_floats(self) -> dict[str, float]:
        return {
            "rec": float(self.rec.detach()),
            "dis": float(self.dis.detach()),
            "total": float(self.total.detach()),
            "swap_accuracy": float(self.swap_accuracy),
        }


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) ** 2).mean()


def swap_tokens(c_i: torch.Tensor, c_j: torch.Tensor, slot: int) -> torch.Tensor:
    """Copy of ``c_i`` with row ``slot`` taken from ``c_j`` (both ``(M, D)``)."""
    if c_i.shape != c_j.shape:
        raise ValueError(f"shape mismatch: {tuple(c_i.shape)} vs {tuple(c_j.shape)}")
    m = c_i.shape[-2]
    if not 0 <= slot < m:
        raise IndexError(f"slot {slot} out of range [0, {m})")
    out = c_i.clone()
    out[..., slot, :] = c_j[..., slot, :]
    return out


def swap_batch(c: torch.Tensor, partners: torch.Tensor, slots: torch.Tensor) -> torch.Tensor:
    """Batched ``swap_tokens``: row ``slots[i]`` of ``c[i]`` <- ``c[partners[i]]``."""
    b, m, _ = c.shape
    if torch.any(slots < 0) or torch.any(slots >= m):
        raise IndexError(f"slot index out of range [0, {m})")
    mask = torch.zeros(b, m, 1, dtype=c.dtype)
    mask[torch.arange(b), slots] = 1.0
    return c * (1 - mask) + c[partners] * mask


def draw_swaps(batch_size: int, num_concepts: int, rng: np.random.Generator,
               same_partner: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Partner ``i+1 mod B`` (never ``i``) and one uniform slot per element."""
    if batch_size < 2 and not same_partner:
        raise ValueError("disentangling loss needs a batch of at least 2")
    idx = np.arange(batch_size)
    partners = idx if same_partner else (idx + 1) % batch_size
    slots = rng.integers(0, num_concepts, size=batch_size)
    return torch.from_numpy(partners), torch.from_numpy(slots)


def _reencode(model, x: torch.Tensor, grad_image_tokenizer: bool) -> torch.Tensor:
    if grad_image_tokenizer:
        z = model.image_tokens(x)
    else:
        with torch.no_grad():
            z = model.image_tokens(x)
    return model.tokenizer(z)


def concept_disentangling_loss(
    model,
    c: torch.Tensor,
    rng: np.random.Generator,
    detach: bool = True,
    grad_image_tokenizer: bool = False,
    grad_prototypes: bool = True,
    same_partner: bool = False,
    x_rec: torch.Tensor | None = None,
    swaps: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> tuple[torch.Tensor, float]:
    """Mean swap-identification cross-entropy and the fraction identified.

    ``c`` holds ``(B, M, D)`` concept tokens from ``model.encode``. ``x_rec`` may
    pass in the already-decoded ``decode_image(c)`` to save one decoder pass.
    With ``detach=False`` ("wo detach" ablation) gradients flow through the
    decoded images into every component.
    """
    b, m, _ = c.shape
    if b < 2 and not same_partner:
        raise ValueError("disentangling loss needs a batch of at least 2")
    partners, slots = swaps if swaps is not None else draw_swaps(b, m, rng, same_partner)
    c_src = c.detach() if detach else c
    c_hat = swap_batch(c_src, partners, slots)
    if detach:
        with torch.no_grad():
            x_a = model.decode_image(c_src) if x_rec is None else x_rec.detach()
            x_b = model.decode_image(c_hat)
    else:
        x_a = model.decode_image(c_src) if x_rec is None else x_rec
        x_b = model.decode_image(c_hat)
    both = torch.cat([x_a, x_b], dim=0)
    if grad_prototypes:
        tokens = _reencode(model, both, grad_image_tokenizer or not detach)
    else:
        proto = model.tokenizer.prototypes.detach()
        if grad_image_tokenizer or not detach:
            z = model.image_tokens(both)
        else:
            with torch.no_grad():
                z = model.image_tokens(both)
        tokens = model.tokenizer(z, proto)
    delta = tokens[:b] - tokens[b:]
    logits = torch.linalg.vector_norm(delta, dim=-1)
    check_finite(logits, "disentangling logits")
    loss = cross_entropy(logits, slots)
    acc = float((logits.argmax(-1) == slots).double().mean())
    return loss, acc


def total_loss(
    model,
    x: torch.Tensor,
    rng: np.random.Generator,
    lambda_dis: float = 1.0,
    detach: bool = True,
    grad_image_tokenizer: bool = False,
    grad_prototypes: bool = True,
    compute_dis: bool = True,
    rec_weight: float = 1.0,
) -> LossReport:
    """``rec_weight * rec + lambda_dis * dis``.

    ``rec`` in the report is the unweighted pixel MSE. With ``lambda_dis = 0``
    the disentangling path still runs (under ``no_grad``) so its swap accuracy
    can be monitored.
    """
    c = model.encode(x)
    x_hat = model.decode_image(c)
    rec = reconstruction_loss(x, x_hat)
    if not compute_dis:
        zero = torch.zeros((), dtype=rec.dtype)
        return LossReport(rec, zero, rec_weight * rec, float("nan"), lambda_dis)
    if lambda_dis == 0.0:
        with torch.no_grad():
            dis, acc = concept_disentangling_loss(model, c, rng, True, False, True, x_rec=x_hat)
        total = rec_weight * rec
    else:
        dis, acc = concept_disentangling_loss(
            model, c, rng, detach, grad_image_tokenizer, grad_prototypes, x_rec=x_hat
        )
        total = rec_weight * rec + lambda_dis * dis
    check_finite(total, "total loss")
    return LossReport(rec, dis, total, acc, lambda_dis)
