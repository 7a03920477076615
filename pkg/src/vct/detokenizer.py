"""Concept detokenizers: rebuild ``(B, N, D)`` image tokens from ``(B, M, D)`` concepts.

``ConceptDetokenizer`` is the symmetric design (image queries cross-attend to
concepts, then mix by self-attention). The CNN and transformer variants are
ablation baselines.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .nn import FeedForward, LayerNorm, MultiHeadAttention, trunc_normal_


class DetokenizerLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.cross = MultiHeadAttention(dim, heads)
        self.norm_ff1 = LayerNorm(dim)
        self.ff1 = FeedForward(dim)
        self.norm_sa = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm_ff2 = LayerNorm(dim)
        self.ff2 = FeedForward(dim)

    def forward(self, y: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        y = y + self.cross(self.norm_q(y), self.norm_kv(c))
        y = y + self.ff1(self.norm_ff1(y))
        h = self.norm_sa(y)
        y = y + self.self_attn(h, h)
        return y + self.ff2(self.norm_ff2(y))


class ConceptDetokenizer(nn.Module):
    def __init__(self, num_tokens: int, dim: int = 256, depth: int = 4, heads: int = 4):
        super().__init__()
        self.num_tokens = num_tokens
        self.dim = dim
        self.queries = nn.Parameter(trunc_normal_(torch.empty(num_tokens, dim)))
        self.layers = nn.ModuleList(DetokenizerLayer(dim, heads) for _ in range(depth))
        self.norm_out = LayerNorm(dim)

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        if c.shape[-1] != self.dim:
            raise ValueError(f"expected concept dim {self.dim}, got {tuple(c.shape)}")
        y = self.queries.expand(c.shape[0], -1, -1)
        for layer in self.layers:
            y = layer(y, c)
        return self.norm_out(y)


class TransformerDetokenizer(nn.Module):
    """Self-attention over ``[C; Y]``; the image-query rows are read out."""

    def __init__(self, num_tokens: int, dim: int = 256, depth: int = 4, heads: int = 4):
        super().__init__()
        self.num_tokens = num_tokens
        self.dim = dim
        self.queries = nn.Parameter(trunc_normal_(torch.empty(num_tokens, dim)))
        self.attn_norms = nn.ModuleList(LayerNorm(dim) for _ in range(depth))
        self.attns = nn.ModuleList(MultiHeadAttention(dim, heads) for _ in range(depth))
        self.ff_norms = nn.ModuleList(LayerNorm(dim) for _ in range(depth))
        self.ffs = nn.ModuleList(FeedForward(dim) for _ in range(depth))
        self.norm_out = LayerNorm(dim)

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        x = torch.cat([c, self.queries.expand(c.shape[0], -1, -1)], dim=1)
        for an, attn, fn, ff in zip(self.attn_norms, self.attns, self.ff_norms, self.ffs):
            h = an(x)
            x = x + attn(h, h)
            x = x + ff(fn(x))
        return self.norm_out(x[:, -self.num_tokens:])


class CNNDetokenizer(nn.Module):
    """Mean-pooled concepts -> 1x1 seed grid -> transposed convolutions -> token grid."""

    def __init__(self, num_tokens: int, dim: int = 256, width: int = 64):
        super().__init__()
        grid = int(math.isqrt(num_tokens))
        if grid * grid != num_tokens or grid & (grid - 1):
            raise ValueError(f"CNN detokenizer needs a power-of-two square token grid, got N={num_tokens}")
        self.num_tokens = num_tokens
        self.dim = dim
        self.grid = grid
        self.seed = nn.Linear(dim, width)
        ups = []
        for _ in range(int(math.log2(grid))):
            ups += [nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.GELU()]
        self.ups = nn.Sequential(*ups)
        self.head = nn.Conv2d(width, dim, 1)
        self.norm_out = LayerNorm(dim)

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        b = c.shape[0]
        g = self.seed(c.mean(dim=1)).reshape(b, -1, 1, 1)
        g = self.head(self.ups(g))
        return self.norm_out(g.flatten(2).transpose(1, 2))


def build_detokenizer(kind: str, num_tokens: int, dim: int, depth: int, heads: int) -> nn.Module:
    if kind == "concept":
        return ConceptDetokenizer(num_tokens, dim, depth, heads)
    if kind == "transformer":
        return TransformerDetokenizer(num_tokens, dim, depth, heads)
    if kind == "cnn":
        return CNNDetokenizer(num_tokens, dim)
    raise ValueError(f"unknown detokenizer kind {kind!r}")
