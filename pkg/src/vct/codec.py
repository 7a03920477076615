"""Image tokenizers / detokenizers.

Images travel as ``(B, 3, H, W)`` tensors. Encoders return ``(B, N, D)`` image
tokens with a learned positional table already added; decoders return raw,
unclamped pixels (clamp only for export).
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .nn import trunc_normal_


class PatchCodec(nn.Module):
    """Non-overlapping patch flatten + affine projection, and its mirror."""

    def __init__(self, image_size: int = 64, patch: int = 8, dim: int = 256, channels: int = 3):
        super().__init__()
        if image_size % patch:
            raise ValueError(f"image size {image_size} not divisible by patch size {patch}")
        self.image_size = image_size
        self.patch = patch
        self.channels = channels
        self.grid = image_size // patch
        self.num_tokens = self.grid ** 2
        self.dim = dim
        patch_dim = patch * patch * channels
        self.proj_in = nn.Linear(patch_dim, dim)
        self.proj_out = nn.Linear(dim, patch_dim)
        self.pos = nn.Parameter(trunc_normal_(torch.empty(self.num_tokens, dim)))

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        if h != self.image_size or w != self.image_size or c != self.channels:
            raise ValueError(f"expected (B, {self.channels}, {self.image_size}, {self.image_size}), got {tuple(x.shape)}")
        p, g = self.patch, self.grid
        x = x.reshape(b, c, g, p, g, p).permute(0, 2, 4, 3, 5, 1)
        return x.reshape(b, g * g, p * p * c)

    def unpatchify(self, t: torch.Tensor) -> torch.Tensor:
        b = t.shape[0]
        p, g, c = self.patch, self.grid, self.channels
        t = t.reshape(b, g, g, p, p, c).permute(0, 5, 1, 3, 2, 4)
        return t.reshape(b, c, g * p, g * p)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj_in(self.patchify(x)) + self.pos

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-2:] != (self.num_tokens, self.dim):
            raise ValueError(f"expected (B, {self.num_tokens}, {self.dim}) tokens, got {tuple(z.shape)}")
        return self.unpatchify(self.proj_out(z))


class ConvCodec(nn.Module):
    """Stride-2 conv encoder down to a 4x4 grid (N = 16) and a mirrored decoder."""

    def __init__(self, image_size: int = 64, dim: int = 256, channels: int = 3, width: int = 64):
        super().__init__()
        stages = int(round(math.log2(image_size / 4)))
        if 4 * 2 ** stages != image_size:
            raise ValueError(f"image size {image_size} must be 4 * 2**k")
        self.image_size = image_size
        self.channels = channels
        self.num_tokens = 16
        self.dim = dim
        enc, dec = [], []
        c_in = channels
        for s in range(stages):
            c_out = dim if s == stages - 1 else width
            enc += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)]
            if s < stages - 1:
                enc += [nn.GELU()]
            c_in = c_out
        for s in range(stages):
            c_out = channels if s == stages - 1 else width
            dec += [nn.ConvTranspose2d(dim if s == 0 else width, c_out, 4, stride=2, padding=1)]
            if s < stages - 1:
                dec += [nn.GELU()]
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)
        self.pos = nn.Parameter(trunc_normal_(torch.empty(self.num_tokens, dim)))
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
                nn.init.zeros_(m.bias)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != (self.channels, self.image_size, self.image_size):
            raise ValueError(f"expected (B, {self.channels}, {self.image_size}, {self.image_size}), got {tuple(x.shape)}")
        g = self.encoder(x)
        return g.flatten(2).transpose(1, 2) + self.pos

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-2:] != (self.num_tokens, self.dim):
            raise ValueError(f"expected (B, {self.num_tokens}, {self.dim}) tokens, got {tuple(z.shape)}")
        b = z.shape[0]
        return self.decoder(z.transpose(1, 2).reshape(b, self.dim, 4, 4))


def build_codec(kind: str, image_size: int, dim: int, patch: int = 8) -> nn.Module:
    if kind == "patch":
        return PatchCodec(image_size, patch, dim)
    if kind in ("conv-ae", "pretrained-conv-ae"):
        return ConvCodec(image_size, dim)
    raise ValueError(f"unknown codec kind {kind!r}")


def pretrain_autoencoder(codec: nn.Module, images_fn, steps: int, lr: float = 2e-3, batch_size: int = 32) -> list[float]:
    """Plain MSE autoencoding of a codec (positional table excluded from the loss path).

    ``images_fn(step, batch_size)`` returns a ``(B, 3, H, W)`` tensor.
    """
    params = [p for n, p in codec.named_parameters() if n != "pos"]
    opt = torch.optim.Adam(params, lr=lr)
    losses = []
    for step in range(steps):
        x = images_fn(step, batch_size)
        z = codec.encode(x) - codec.pos
        loss = ((codec.decode(z) - x) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
