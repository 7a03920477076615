"""Concept tokenizer: prototypes query the image stream through cross-attention only."""
from __future__ import annotations

import torch
from torch import nn

from .nn import FeedForward, LayerNorm, MultiHeadAttention, trunc_normal_


class TokenizerLayer(nn.Module):
    """Image branch (self-attn + FFN) followed by concept branch (cross-attn + FFN).

    With ``concept_self_attention`` an extra self-attention over concept tokens
    is inserted after the cross-attention; this breaks per-token independence
    and exists only for the ablation.
    """

    def __init__(self, dim: int, heads: int, concept_self_attention: bool = False):
        super().__init__()
        self.img_norm1 = LayerNorm(dim)
        self.img_attn = MultiHeadAttention(dim, heads)
        self.img_norm2 = LayerNorm(dim)
        self.img_ff = FeedForward(dim)

        self.cpt_norm_q = LayerNorm(dim)
        self.cpt_norm_kv = LayerNorm(dim)
        self.cpt_cross = MultiHeadAttention(dim, heads)
        self.cpt_norm_ff = LayerNorm(dim)
        self.cpt_ff = FeedForward(dim)
        if concept_self_attention:
            self.cpt_norm_sa = LayerNorm(dim)
            self.cpt_self = MultiHeadAttention(dim, heads)
        else:
            self.cpt_self = None

    def image_branch(self, z: torch.Tensor) -> torch.Tensor:
        h = self.img_norm1(z)
        z = z + self.img_attn(h, h)
        return z + self.img_ff(self.img_norm2(z))

    def concept_branch(self, c: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        c = c + self.cpt_cross(self.cpt_norm_q(c), self.cpt_norm_kv(z))
        if self.cpt_self is not None:
            h = self.cpt_norm_sa(c)
            c = c + self.cpt_self(h, h)
        return c + self.cpt_ff(self.cpt_norm_ff(c))


class ConceptTokenizer(nn.Module):
    """Maps image tokens ``(B, N, D)`` to concept tokens ``(B, M, D)``.

    Row ``j`` of the output depends only on prototype ``j`` and the image
    tokens, so ``tokenize(P[perm], Z) == tokenize(P, Z)[perm]``.
    """

    def __init__(self, num_concepts: int = 20, dim: int = 256, depth: int = 4, heads: int = 4,
                 concept_self_attention: bool = False):
        super().__init__()
        self.num_concepts = num_concepts
        self.dim = dim
        self.prototypes = nn.Parameter(trunc_normal_(torch.empty(num_concepts, dim)))
        self.layers = nn.ModuleList(
            TokenizerLayer(dim, heads, concept_self_attention) for _ in range(depth)
        )
        self.norm_out = LayerNorm(dim)
        self.image_trace: list[torch.Tensor] | None = None

    def forward(self, z: torch.Tensor, prototypes: torch.Tensor | None = None) -> torch.Tensor:
        p = self.prototypes if prototypes is None else prototypes
        if z.shape[-1] != self.dim or p.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: image tokens {tuple(z.shape)}, prototypes {tuple(p.shape)}")
        c = p.expand(z.shape[0], *p.shape[-2:]) if p.dim() == 2 else p
        for layer in self.layers:
            z = layer.image_branch(z)
            if self.image_trace is not None:
                self.image_trace.append(z.detach().clone())
            c = layer.concept_branch(c, z)
        return self.norm_out(c)

    def trace_image_branch(self, z: torch.Tensor, prototypes: torch.Tensor | None = None) -> list[torch.Tensor]:
        """Run a forward pass and return every layer's image-branch output."""
        self.image_trace = []
        try:
            self(z, prototypes)
            return self.image_trace
        finally:
            self.image_trace = None
