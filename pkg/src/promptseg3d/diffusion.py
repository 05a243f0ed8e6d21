"""Noise schedule, forward diffusion of label latents, the conditional
ResUNet denoiser and the deterministic DDIM sampler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .debug import check_finite
from .errors import ShapeError, ValidationError
from .layers import ResBlock3d, SpatialSelfAttention, norm3d, sinusoidal_embedding


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by timestep; index 0 holds the ``alpha_bar = 1``
    convention and ``beta[0] = 0``."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_t(self, t) -> None:
        arr = np.asarray(t.detach().cpu() if torch.is_tensor(t) else t)
        if arr.size and (arr.min() < 1 or arr.max() > self.T):
            raise ValidationError(f"timestep must lie in [1, {self.T}], got {arr.min()}..{arr.max()}")

    def sqrt_ab(self, t, like: torch.Tensor) -> torch.Tensor:
        return _gather(np.sqrt(self.alpha_bar), t, like)

    def sqrt_one_minus_ab(self, t, like: torch.Tensor) -> torch.Tensor:
        return _gather(np.sqrt(1.0 - self.alpha_bar), t, like)


def _gather(table: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Per-sample coefficient broadcastable against ``like`` (B, ...)."""
    tab = torch.as_tensor(table, dtype=torch.float64, device=like.device)
    if torch.is_tensor(t) and t.dim() > 0:
        v = tab[t.long().to(like.device)]
        return v.view(-1, *([1] * (like.dim() - 1))).to(like.dtype)
    return tab[int(t)].to(like.dtype)


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; ``t`` is an int or a (B,) tensor."""
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    schedule.check_t(t)
    return schedule.sqrt_ab(t, z0) * z0 + schedule.sqrt_one_minus_ab(t, z0) * eps


def predict_z0(z_t: torch.Tensor, t, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert :func:`forward_diffuse` given a noise estimate."""
    return (z_t - schedule.sqrt_one_minus_ab(t, z_t) * eps_hat) / schedule.sqrt_ab(t, z_t)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending grid ``T, T - s, ...`` of length ``steps`` with ``s = T // steps``."""
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ValidationError(f"steps={steps} exceeds T={T}")
    s = T // steps
    return [T - i * s for i in range(steps)]


def initial_noise(shape, seed: int, dtype=torch.float32, device=None) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed) % (2**63))
    return torch.randn(shape, generator=g, dtype=dtype).to(device or "cpu")


Denoise = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@torch.no_grad()
def ddim_sample(condition: torch.Tensor, steps: int, schedule: NoiseSchedule, denoiser: Denoise,
                rng_seed: int, k: int = 4, z_T: torch.Tensor | None = None,
                z0_range=None) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM from ``z_T ~ N(0, I)`` to the t = 0 state.

    ``denoiser(z_t, condition, t)`` returns the noise estimate; ``t`` is a
    (B,) long tensor. ``z0_range = (lo, hi)`` (floats or broadcastable
    tensors) clamps each z0 estimate and re-derives the noise estimate from
    the clamped value, so the update stays on a consistent DDIM path. Early
    estimates are divided by a tiny ``sqrt(alpha_bar)`` and otherwise drag the
    chain off the latent distribution.
    """
    ts = ddim_timesteps(schedule.T, steps)
    b = condition.shape[0]
    shape = (b, k, *condition.shape[2:])
    z = z_T if z_T is not None else initial_noise(shape, rng_seed, condition.dtype, condition.device)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        tt = torch.full((b,), t, dtype=torch.long, device=z.device)
        eps = denoiser(z, condition, tt)
        z0 = predict_z0(z, t, eps, schedule)
        if z0_range is not None:
            lo, hi = (torch.as_tensor(v, dtype=z0.dtype, device=z0.device) for v in z0_range)
            z0 = torch.maximum(torch.minimum(z0, hi), lo)
            ab = float(schedule.alpha_bar[t])
            eps = (z - np.sqrt(ab) * z0) / np.sqrt(1.0 - ab)
        ab_prev = float(schedule.alpha_bar[t_prev])
        z = np.sqrt(ab_prev) * z0 + np.sqrt(1.0 - ab_prev) * eps
    return check_finite(z, "ddim_latent")


class Denoiser(nn.Module):
    """Two-level ResUNet predicting the noise in a label latent.

    Input is the channel concatenation of the noisy latent (k) and the
    conditioning grid; the sinusoidal timestep embedding is added inside
    every residual block; self-attention sits at the bottleneck.
    """

    def __init__(self, k: int = 4, cond_channels: int = 32, widths=(32, 64),
                 time_dim: int = 128, heads: int = 4):
        super().__init__()
        w0, w1 = widths
        self.k = k
        self.cond_channels = cond_channels
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.inp = nn.Conv3d(k + cond_channels, w0, 3, padding=1)
        self.enc = ResBlock3d(w0, w0, time_dim)
        self.down = nn.Conv3d(w0, w1, 3, stride=2, padding=1)
        self.mid1 = ResBlock3d(w1, w1, time_dim)
        self.mid_attn = SpatialSelfAttention(w1, heads)
        self.mid2 = ResBlock3d(w1, w1, time_dim)
        self.up = nn.ConvTranspose3d(w1, w0, 2, stride=2)
        self.dec = ResBlock3d(2 * w0, w0, time_dim)
        self.out_norm = norm3d(w0)
        self.out = nn.Conv3d(w0, k, 3, padding=1)

    def forward(self, z_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if z_t.shape[2:] != cond.shape[2:] or z_t.shape[0] != cond.shape[0]:
            raise ShapeError(f"noisy latent {tuple(z_t.shape)} and condition {tuple(cond.shape)} misaligned")
        if z_t.shape[1] != self.k or cond.shape[1] != self.cond_channels:
            raise ShapeError(f"expected {self.k} latent + {self.cond_channels} condition channels")
        if any(s % 2 for s in z_t.shape[2:]):
            raise ShapeError(f"latent grid {tuple(z_t.shape[2:])} must be even for the down/up path")
        if t.dim() == 0:
            t = t.expand(z_t.shape[0])
        temb = self.time_mlp(sinusoidal_embedding(t, self.time_dim).to(z_t.dtype))
        h0 = self.enc(self.inp(torch.cat([z_t, cond], dim=1)), temb)
        h = self.mid1(self.down(h0), temb)
        h = self.mid2(self.mid_attn(h), temb)
        h = self.dec(torch.cat([self.up(h), h0], dim=1), temb)
        return check_finite(self.out(F.silu(self.out_norm(h))), "eps_hat")


def denoise_step(noisy_latent: torch.Tensor, condition: torch.Tensor, t, denoiser: Denoiser) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(noisy_latent.shape[0])
    return denoiser(noisy_latent, condition, t)
