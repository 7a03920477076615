"""Finite-difference audit of every gradient path in a tiny float64 model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .losses import concept_disentangling_loss, draw_swaps, reconstruction_loss, swap_batch
from .model import VCT
from .nn import grad_check, set_determinism

TOKENIZER_PREFIX = "tokenizer."


@dataclass
class GradcheckResult:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    zero_outside_tokenizer: bool | None = None
    nonzero_in_detokenizer_without_detach: bool | None = None
    probes: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    def lines(self) -> list[str]:
        out = [f"{k} max_rel_err = {v:.3e}" for k, v in self.max_rel_err.items()]
        out.append(f"overall max_rel_err = {self.worst:.3e}")
        out.append(f"detach: zero L_dis gradient outside concept tokenizer = {self.zero_outside_tokenizer}")
        out.append(f"no-detach: nonzero L_dis gradient in detokenizer = {self.nonzero_in_detokenizer_without_detach}")
        out.append(f"probes = {self.probes}")
        return out


def tiny_model(seed: int = 0, **overrides) -> VCT:
    """D = 8, N = 4 (16x16 image, patch 8), M = 3, float64."""
    torch.manual_seed(seed)
    kw = dict(image_size=16, patch=8, num_concepts=3, dim=8, enc_depth=2, dec_depth=2, heads=2)
    kw.update(overrides)
    model = VCT(**kw).double()
    # Re-draw weights at a larger scale so every path carries non-trivial gradient.
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() >= 2 or name.endswith("bias"):
                p.normal_(0.0, 0.3)
    return model


def _by_group(model, names):
    groups: dict[str, list[str]] = {}
    for n in names:
        groups.setdefault(n.split(".", 1)[0], []).append(n)
    return groups


def run_gradcheck(seed: int = 0, probes: int = 4, batch_size: int = 4, model: VCT | None = None) -> GradcheckResult:
    set_determinism()
    model = model if model is not None else tiny_model(seed)
    params = dict(model.named_parameters())
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(batch_size, 3, model.image_size, model.image_size, generator=gen, dtype=torch.float64)
    partners, slots = draw_swaps(batch_size, model.num_concepts, np.random.default_rng(seed))
    result = GradcheckResult()

    # Reconstruction path: every parameter.
    def rec_closure():
        return reconstruction_loss(x, model.decode_image(model.encode(x)))

    for group, names in _by_group(model, params).items():
        err, recs = grad_check(rec_closure, {n: params[n] for n in names}, probes=probes, seed=seed)
        result.max_rel_err[f"rec/{group}"] = err
        result.probes += len(recs)

    # Detached disentangling path: decoded images are constants, only the
    # concept tokenizer sees the loss.
    def scoped_grads():
        model.zero_grad(set_to_none=True)
        c = model.encode(x)
        loss, _ = concept_disentangling_loss(model, c, None, detach=True, swaps=(partners, slots))
        loss.backward()
        return {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}

    grads = scoped_grads()
    outside = [n for n in params if not n.startswith(TOKENIZER_PREFIX)]
    result.zero_outside_tokenizer = all(bool(torch.all(grads[n] == 0)) for n in outside)

    with torch.no_grad():
        c0 = model.encode(x)
        frozen = torch.cat([model.decode_image(c0), model.decode_image(swap_batch(c0, partners, slots))])
        z_frozen = model.image_tokens(frozen)

    def dis_fixed_images():
        tokens = model.tokenizer(z_frozen)
        delta = tokens[:batch_size] - tokens[batch_size:]
        logits = torch.linalg.vector_norm(delta, dim=-1)
        return torch.nn.functional.cross_entropy(logits, slots)

    inside = {n: params[n] for n in params if n.startswith(TOKENIZER_PREFIX)}
    err, recs = grad_check(dis_fixed_images, inside, probes=probes, seed=seed + 1, grads=grads)
    result.max_rel_err["dis_detach/tokenizer"] = err
    result.probes += len(recs)

    # "wo detach": the loss is differentiated end to end.
    def dis_full():
        c = model.encode(x)
        loss, _ = concept_disentangling_loss(model, c, None, detach=False, swaps=(partners, slots))
        return loss

    model.zero_grad(set_to_none=True)
    dis_full().backward()
    result.nonzero_in_detokenizer_without_detach = any(
        p.grad is not None and bool(torch.any(p.grad != 0))
        for n, p in params.items() if n.startswith("detokenizer.")
    )
    for group, names in _by_group(model, params).items():
        err, recs = grad_check(dis_full, {n: params[n] for n in names}, probes=probes, seed=seed + 2)
        result.max_rel_err[f"dis_nodetach/{group}"] = err
        result.probes += len(recs)
    model.zero_grad(set_to_none=True)
    return result
