"""Building blocks shared by the encoders, the fusion block and the denoiser."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def norm3d(channels: int, groups: int = 8) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, channels), channels)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Transformer-style timestep embedding, ``[sin | cos]`` halves."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention over a (B, L, dim) sequence.

    The most recent attention weights are kept in ``last_weights`` when
    ``keep_weights`` is set, for inspection in tests.
    """

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.keep_weights = False
        self.last_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, dim = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        split = lambda y: y.view(b, n, self.heads, dim // self.heads).transpose(1, 2)
        q, k, v = split(q), split(k), split(v)
        if self.keep_weights:
            scores = q @ k.transpose(-1, -2) / math.sqrt(dim // self.heads)
            if key_mask is not None:
                scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
            w = scores.softmax(dim=-1)
            self.last_weights = w.detach()
            y = w @ v
        else:
            attn_mask = None if key_mask is None else key_mask[:, None, None, :]
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        y = y.transpose(1, 2).reshape(b, n, dim)
        return self.out(y)


class SpatialSelfAttention(nn.Module):
    """Pre-norm residual self-attention over the flattened voxels of a 3D map."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.norm = norm3d(channels)
        self.attn = MultiHeadSelfAttention(channels, heads)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c = x.shape[:2]
        seq = self.norm(x).flatten(2).transpose(1, 2)
        y = self.attn(seq).transpose(1, 2).reshape(x.shape)
        return x + y


class ResBlock3d(nn.Module):
    """GroupNorm/SiLU residual block with optional additive time embedding."""

    def __init__(self, cin: int, cout: int, time_dim: int | None = None):
        super().__init__()
        self.norm1 = norm3d(cin)
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm2 = norm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout) if time_dim else None
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time is not None and temb is not None:
            h = h + self.time(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)
