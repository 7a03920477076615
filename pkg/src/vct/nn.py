"""Layer primitives, optimizer and finite-difference gradient checker.

Autodiff is torch's; everything here is the thin set of differentiable pieces
the tokenizer/detokenizer stacks are built from.
"""
from __future__ import annotations

import math
import os
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

INIT_STD = 0.02


class NumericError(FloatingPointError):
    """Raised when a loss, activation or gradient becomes NaN/Inf."""


def set_determinism(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)
    os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    check_finite(x, "softmax input")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ValueError(f"gain/bias length {gain.shape[-1]} does not match feature size {x.shape[-1]}")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def cross_entropy(logits: torch.Tensor, label) -> torch.Tensor:
    """``-log softmax(logits)[label]``; batched over leading dims, mean-reduced."""
    label = torch.as_tensor(label, dtype=torch.long)
    m = logits.shape[-1]
    if torch.any(label < 0) or torch.any(label >= m):
        raise ValueError(f"label out of range [0, {m})")
    if logits.dim() == 1:
        return -F.log_softmax(logits, dim=-1)[label]
    return F.cross_entropy(logits, label)


def trunc_normal_(t: torch.Tensor, std: float = INIT_STD) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


def init_weights(module: nn.Module, std: float = INIT_STD) -> None:
    """Truncated-normal weights, zero biases, unit LayerNorm gains."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            trunc_normal_(m.weight, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class LayerNorm(nn.LayerNorm):
    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head projections.

    ``forward(q, kv)`` attends each query row over all key/value rows; query
    rows never see each other, so the output is row-wise equivariant in ``q``
    and invariant to jointly permuting the rows of ``kv``.
    """

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def forward(self, q: torch.Tensor, kv: torch.Tensor, v: torch.Tensor | None = None) -> torch.Tensor:
        v = kv if v is None else v
        if q.shape[-1] != self.to_q.in_features or kv.shape[-1] != self.to_k.in_features:
            raise ValueError(f"dimension mismatch: q {tuple(q.shape)}, kv {tuple(kv.shape)}")
        if kv.shape[:-1] != v.shape[:-1]:
            raise ValueError(f"key/value length mismatch: {tuple(kv.shape)} vs {tuple(v.shape)}")
        h = self.heads

        def split(t):
            return t.reshape(*t.shape[:-1], h, -1).transpose(-3, -2)

        qh, kh, vh = split(self.to_q(q)), split(self.to_k(kv)), split(self.to_v(v))
        attn = softmax(qh @ kh.transpose(-1, -2) * self.scale, axis=-1)
        if self.keep_weights:
            self.last_weights = attn.detach()
        out = (attn @ vh).transpose(-3, -2)
        return self.to_out(out.reshape(*out.shape[:-2], -1))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)

    def forward(self, x):
        if x.shape[-1] != self.fc1.in_features:
            raise ValueError(f"expected last axis {self.fc1.in_features}, got {x.shape[-1]}")
        return self.fc2(F.gelu(self.fc1(x)))


def cosine_lr(step: int, base_lr: float, total_steps: int, warmup_steps: int = 0, min_ratio: float = 0.0) -> float:
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    t = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return base_lr * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * t)))


def make_adam(params: Iterable[nn.Parameter], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps, weight_decay=0.0)


def adam_step(
    optimizer: torch.optim.Optimizer,
    named_params: Iterable[tuple[str, nn.Parameter]],
    lr: float | None = None,
    clip: float = 0.0,
) -> None:
    """Validate gradients, apply one bias-corrected Adam update, zero grads.

    ``clip > 0`` rescales the global gradient norm to at most ``clip`` first.
    Raises ``NumericError`` naming the first parameter whose gradient is not finite.
    """
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    if clip > 0:
        torch.nn.utils.clip_grad_norm_([p for _, p in named_params if p.grad is not None], clip)
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.step()
    optimizer.zero_grad(set_to_none=False)


def grad_check(
    closure: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
    probes: int = 20,
    step: float = 1e-5,
    seed: int = 0,
    grads: dict[str, torch.Tensor] | None = None,
    floor: float = 1e-6,
) -> tuple[float, list[tuple[str, tuple, float, float, float]]]:
    """Compare analytic gradients with central finite differences.

    ``closure`` must return a scalar loss and be deterministic. Parameters must be
    float64. For each parameter ``probes`` random scalar entries are perturbed by
    ``+-step``. Analytic gradients are taken from ``grads`` if given (this lets a
    caller audit a gradient it assembled itself), otherwise from one backward
    pass of ``closure``.

    Returns ``(max_rel_err, records)`` with one ``(name, index, analytic,
    numeric, rel_err)`` record per probe. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = dict(params)
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 parameters, {name} is {p.dtype}")
    if grads is None:
        for p in params.values():
            p.grad = None
        loss = closure()
        loss.backward()
        grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
    rng = np.random.default_rng(seed)
    records = []
    worst = 0.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            count = min(probes, flat.numel())
            for i in rng.choice(flat.numel(), size=count, replace=False):
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + step
                up = closure().item()
                flat[i] = orig - step
                down = closure().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                analytic = grads[name].reshape(-1)[i].item()
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
                worst = max(worst, rel)
                records.append((name, np.unravel_index(i, tuple(p.shape)), analytic, numeric, rel))
    return worst, records
