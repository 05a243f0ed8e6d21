from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .debug import check_finite
from .errors import ShapeError
from .layers import ResBlock3d, SpatialSelfAttention, norm3d


def check_divisible(shape, stride: int, what: str = "patch") -> None:
    if any(s % stride for s in shape):
        raise ShapeError(f"{what} dims {tuple(shape)} not divisible by stride {stride}")


class ImageEncoder(nn.Module):
    """Stem conv, two residual stages that each halve resolution, then two
    residual stages with multi-head self-attention over the voxel sequence.

    Maps (B, C, D, H, W) to the latent grid (B, c, D/4, H/4, W/4).
    """

    stride = 4

    def __init__(self, in_channels: int = 1, c: int = 32, widths=(8, 16, 32), heads: int = 4):
        super().__init__()
        w0, w1, w2 = widths
        self.c = c
        self.stem = nn.Conv3d(in_channels, w0, 3, padding=1)
        self.down1 = nn.Conv3d(w0, w1, 3, stride=2, padding=1)
        self.res1 = ResBlock3d(w1, w1)
        self.down2 = nn.Conv3d(w1, w2, 3, stride=2, padding=1)
        self.res2 = ResBlock3d(w2, w2)
        self.res3 = ResBlock3d(w2, w2)
        self.attn3 = SpatialSelfAttention(w2, heads)
        self.res4 = ResBlock3d(w2, w2)
        self.attn4 = SpatialSelfAttention(w2, heads)
        self.out_norm = norm3d(w2)
        self.out = nn.Conv3d(w2, c, 1)

    @property
    def attention_layers(self):
        return [self.attn3.attn, self.attn4.attn]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_divisible(x.shape[2:], self.stride)
        h = self.stem(x)
        h = self.res1(self.down1(F.silu(h)))
        h = self.res2(self.down2(h))
        h = self.attn3(self.res3(h))
        h = self.attn4(self.res4(h))
        return check_finite(self.out(F.silu(self.out_norm(h))), "z_i")


class SimpleImageEncoder(nn.Module):
    """Ablation encoder: average-pool downsampling plus a pointwise projection."""

    stride = 4

    def __init__(self, in_channels: int = 1, c: int = 32):
        super().__init__()
        self.c = c
        self.proj = nn.Conv3d(in_channels, c, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_divisible(x.shape[2:], self.stride)
        return check_finite(self.proj(F.avg_pool3d(x, self.stride)), "z_i")


def encode_image(patch, encoder: nn.Module) -> torch.Tensor:
    """Encode one (D, H, W) or (C, D, H, W) patch in evaluation mode and
    return the latent grid without the batch axis."""
    x = torch.as_tensor(patch, dtype=next(encoder.parameters()).dtype)
    while x.dim() < 5:
        x = x.unsqueeze(0)
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            z = encoder(x)
    finally:
        encoder.train(was_training)
    return z[0]
