"""Residual cross-attention of image voxels (queries) over text rows
(keys/values).

With a single pooled text vector the key sequence has length one, so every
softmax weight is exactly 1 and the update reduces to adding ``z_t W_v`` at
every voxel. Token mode uses the per-token rows from the text encoder as the
key/value sequence instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .debug import check_finite
from .errors import ShapeError
from .text.encoder import TextFeatures

FUSION_MODES = ("pooled", "tokens")


@dataclass
class FusionParams:
    W_q: torch.Tensor  # (c, d_k)
    W_k: torch.Tensor  # (d_t, d_k)
    W_v: torch.Tensor  # (d_t, c)

    @property
    def d_k(self) -> int:
        return self.W_q.shape[1]

    def check(self, c: int, d_t: int) -> None:
        if self.W_q.shape[0] != c or self.W_v.shape[1] != c:
            raise ShapeError(f"fusion params expect c={self.W_q.shape[0]}, got {c}")
        if self.W_k.shape[0] != d_t or self.W_v.shape[0] != d_t:
            raise ShapeError(f"fusion params expect d_t={self.W_k.shape[0]}, got {d_t}")
        if self.W_k.shape[1] != self.d_k:
            raise ShapeError("W_q and W_k disagree on d_k")


def fuse(z_i: torch.Tensor, text, params: FusionParams, mask: torch.Tensor | None = None,
         heads: int = 1, return_weights: bool = False):
    """``z_fused = z_i + reshape(softmax(z_i' W_q (Z W_k)^T / sqrt(d_k)) Z W_v)``.

    ``z_i`` is (B, c, d, h, w); ``text`` is (B, d_t) for a pooled vector or
    (B, S, d_t) for a key/value sequence with optional boolean ``mask``.
    Each head uses ``d_k / heads`` query/key dims and ``c / heads`` value dims.
    """
    if z_i.dim() != 5:
        raise ShapeError(f"z_i must be (B, c, d, h, w), got {tuple(z_i.shape)}")
    if text.dim() == 2:
        text = text[:, None, :]
    b, c = z_i.shape[:2]
    s, d_t = text.shape[1:]
    if text.shape[0] != b:
        raise ShapeError(f"batch mismatch: image {b}, text {text.shape[0]}")
    params.check(c, d_t)
    d_k = params.d_k
    if d_k % heads or c % heads:
        raise ShapeError(f"d_k={d_k} and c={c} must be divisible by heads={heads}")

    q = z_i.flatten(2).transpose(1, 2) @ params.W_q  # (B, L, d_k)
    k = text @ params.W_k  # (B, S, d_k)
    v = text @ params.W_v  # (B, S, c)
    n = q.shape[1]
    q = q.view(b, n, heads, d_k // heads).transpose(1, 2)
    k = k.view(b, s, heads, d_k // heads).transpose(1, 2)
    v = v.view(b, s, heads, c // heads).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(d_k // heads)
    if mask is not None:
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
    w = scores.softmax(dim=-1)  # (B, heads, L, S)
    upd = (w @ v).transpose(1, 2).reshape(b, n, c).transpose(1, 2).reshape(z_i.shape)
    out = z_i + upd
    return (out, w) if return_weights else out


class CrossModalFusion(nn.Module):
    def __init__(self, c: int = 32, d_t: int = 64, d_k: int = 32, heads: int = 1, mode: str = "tokens"):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}")
        self.c, self.d_t, self.d_k, self.heads, self.mode = c, d_t, d_k, heads, mode
        self.W_q = nn.Parameter(torch.randn(c, d_k) / math.sqrt(c))
        self.W_k = nn.Parameter(torch.randn(d_t, d_k) / math.sqrt(d_t))
        self.W_v = nn.Parameter(torch.randn(d_t, c) / math.sqrt(d_t))
        self.last_weights: torch.Tensor | None = None

    @property
    def out_channels(self) -> int:
        return self.c

    @property
    def params(self) -> FusionParams:
        return FusionParams(self.W_q, self.W_k, self.W_v)

    def forward(self, z_i: torch.Tensor, text: TextFeatures) -> torch.Tensor:
        if self.mode == "pooled":
            kv, mask = text.pooled, None
        else:
            kv, mask = text.tokens, text.mask
        out, w = fuse(z_i, kv, self.params, mask=mask, heads=self.heads, return_weights=True)
        self.last_weights = w.detach()
        return check_finite(out, "z_fused")


class ConcatFusion(nn.Module):
    """Ablation: append the pooled text vector, broadcast over the grid, as
    extra channels instead of attending."""

    def __init__(self, c: int = 32, d_t: int = 64):
        super().__init__()
        self.c, self.d_t = c, d_t

    @property
    def out_channels(self) -> int:
        return self.c + self.d_t

    def forward(self, z_i: torch.Tensor, text: TextFeatures) -> torch.Tensor:
        t = text.pooled.to(z_i.dtype)[:, :, None, None, None].expand(-1, -1, *z_i.shape[2:])
        return check_finite(torch.cat([z_i, t], dim=1), "z_fused")
