"""The full encoder/decoder: image codec + concept tokenizer + concept detokenizer."""
from __future__ import annotations

import torch
from torch import nn

from .codec import build_codec
from .config import ExperimentConfig
from .detokenizer import build_detokenizer
from .nn import INIT_STD, init_weights, trunc_normal_
from .tokenizer import ConceptTokenizer


class VCT(nn.Module):
    """``encode`` images to concept tokens and ``decode_image`` them back.

    Parameter groups (by name prefix): ``codec.`` is the image tokenizer and
    detokenizer, ``tokenizer.`` the concept tokenizer including its
    prototypes, ``detokenizer.`` the concept detokenizer including its image
    queries.
    """

    def __init__(
        self,
        image_size: int = 64,
        codec: str = "patch",
        patch: int = 8,
        num_concepts: int = 20,
        dim: int = 256,
        enc_depth: int = 4,
        dec_depth: int = 4,
        heads: int = 4,
        concept_self_attention: bool = False,
        detokenizer: str = "concept",
        concept_pos_embedding: bool = False,
        init_std: float = INIT_STD,
        prototype_std: float = INIT_STD,
    ):
        super().__init__()
        self.image_size = image_size
        self.num_concepts = num_concepts
        self.dim = dim
        self.codec = build_codec(codec, image_size, dim, patch)
        self.tokenizer = ConceptTokenizer(num_concepts, dim, enc_depth, heads, concept_self_attention)
        self.detokenizer = build_detokenizer(detokenizer, self.codec.num_tokens, dim, dec_depth, heads)
        init_weights(self.tokenizer, init_std)
        init_weights(self.detokenizer, init_std)
        if codec == "patch":
            init_weights(self.codec, init_std)
        with torch.no_grad():
            trunc_normal_(self.tokenizer.prototypes, prototype_std)
        if concept_pos_embedding:
            self.concept_pos = nn.Parameter(trunc_normal_(torch.empty(num_concepts, dim)))
        else:
            self.concept_pos = None

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "VCT":
        return cls(
            image_size=cfg.image_size,
            codec=cfg.codec,
            patch=cfg.patch,
            num_concepts=cfg.num_concepts,
            dim=cfg.dim,
            enc_depth=cfg.enc_depth,
            dec_depth=cfg.dec_depth,
            heads=cfg.heads,
            concept_self_attention=cfg.concept_self_attention,
            detokenizer=cfg.detokenizer_kind,
            concept_pos_embedding=cfg.concept_pos_embedding,
            init_std=cfg.init_std,
            prototype_std=cfg.prototype_std,
        )

    @property
    def num_image_tokens(self) -> int:
        return self.codec.num_tokens

    def image_tokens(self, x: torch.Tensor) -> torch.Tensor:
        return self.codec.encode(x)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Images ``(B, 3, H, W)`` -> concept tokens ``(B, M, D)``."""
        return self.tokenizer(self.codec.encode(x))

    def decode_tokens(self, c: torch.Tensor) -> torch.Tensor:
        """Concept tokens -> reconstructed image tokens ``(B, N, D)``."""
        if self.concept_pos is not None:
            c = c + self.concept_pos
        return self.detokenizer(c)

    def decode_image(self, c: torch.Tensor) -> torch.Tensor:
        """Concept tokens -> unclamped pixels ``(B, 3, H, W)``."""
        return self.codec.decode(self.decode_tokens(c))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        c = self.encode(x)
        return c, self.decode_image(c)

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".", 1)[0], []).append(name)
        return groups


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """``(B, H, W, 3)`` array in [0, 1] (or uint8) -> ``(B, 3, H, W)`` tensor."""
    if isinstance(images, torch.Tensor):
        t = images
    else:
        import numpy as np

        arr = np.asarray(images)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        t = torch.from_numpy(np.ascontiguousarray(arr))
    return t.to(dtype).permute(0, 3, 1, 2).contiguous()


def to_images(t: torch.Tensor, clamp: bool = True):
    """``(B, 3, H, W)`` tensor -> ``(B, H, W, 3)`` numpy array."""
    out = t.detach().permute(0, 2, 3, 1)
    if clamp:
        out = out.clamp(0.0, 1.0)
    return out.cpu().numpy()
