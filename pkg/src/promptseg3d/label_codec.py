"""Label latents: discrete masks in, standardized k-channel latents out, and
a skip-free decoder back to per-voxel class probabilities."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .debug import check_finite
from .errors import ShapeError, ValidationError
from .image_encoder import check_divisible
from .layers import ResBlock3d, norm3d

# pre-normalization latent variance can be ~1e-6 at initialization
NORM_EPS = 1e-10


@dataclass
class LabelLatent:
    values: torch.Tensor  # (B, k, d, h, w)
    normalized: bool = True


class SymmetricConv3d(nn.Conv3d):
    """3D convolution whose kernel is averaged over all axis reflections.

    Any stack of these, pointwise nonlinearities, aligned average pooling
    and per-channel normalization commutes with axis flips of the input.
    """

    def __init__(self, cin: int, cout: int, kernel_size: int = 3):
        super().__init__(cin, cout, kernel_size, padding=kernel_size // 2)

    def symmetric_weight(self) -> torch.Tensor:
        w = self.weight
        for dim in (2, 3, 4):
            w = 0.5 * (w + w.flip(dim))
        return w

    def forward(self, x):
        return F.conv3d(x, self.symmetric_weight(), self.bias, padding=self.padding)


def one_hot(labels: torch.Tensor, num_classes: int, dtype=None) -> torch.Tensor:
    """(B, D, H, W) integer labels -> (B, N, D, H, W) floats."""
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"class ids must lie in [0, {num_classes - 1}]")
    oh = F.one_hot(labels, num_classes).permute(0, 4, 1, 2, 3)
    return oh.to(dtype or torch.get_default_dtype())


class LabelEncoder(nn.Module):
    stride = 4

    def __init__(self, num_classes: int = 2, k: int = 4, widths=(8, 16), momentum: float = 0.1):
        super().__init__()
        w0, w1 = widths
        self.num_classes = num_classes
        self.k = k
        self.conv0 = SymmetricConv3d(num_classes, w0)
        self.conv1 = SymmetricConv3d(w0, w1)
        self.conv2 = SymmetricConv3d(w1, w1)
        self.conv3 = SymmetricConv3d(w1, w1)
        self.head = nn.Conv3d(w1, k, 1)
        # per-channel standardization; running statistics at evaluation
        self.norm = nn.BatchNorm3d(k, eps=NORM_EPS, affine=False, momentum=momentum)

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        check_divisible(labels.shape[-3:], self.stride, "label patch")
        x = one_hot(labels, self.num_classes, self.head.weight.dtype)
        h = F.avg_pool3d(F.silu(self.conv0(x)), 2)
        h = F.silu(self.conv1(h))
        h = F.avg_pool3d(F.silu(self.conv2(h)), 2)
        h = F.silu(self.conv3(h))
        return check_finite(self.norm(self.head(h)), "z_l0")


class LabelDecoder(nn.Module):
    """ResUNet-style decoder without skip connections; softmax head."""

    stride = 4

    def __init__(self, num_classes: int = 2, k: int = 4, widths=(8, 16)):
        super().__init__()
        w0, w1 = widths
        self.k = k
        self.num_classes = num_classes
        self.inp = nn.Conv3d(k, w1, 3, padding=1)
        self.res1 = ResBlock3d(w1, w1)
        self.up1 = nn.ConvTranspose3d(w1, w1, 2, stride=2)
        self.res2 = ResBlock3d(w1, w1)
        self.up2 = nn.ConvTranspose3d(w1, w0, 2, stride=2)
        self.out_norm = norm3d(w0)
        self.head = nn.Conv3d(w0, num_classes, 3, padding=1)

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.k:
            raise ShapeError(f"latent has {z.shape[1]} channels, decoder expects {self.k}")
        h = self.res1(self.inp(z))
        h = self.res2(self.up1(h))
        h = self.up2(h)
        return self.head(F.silu(self.out_norm(h)))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.logits(z).softmax(dim=1)


class SimpleLabelEncoder(nn.Module):
    """Ablation codec encoder: one-hot average pooling and a pointwise projection."""

    stride = 4

    def __init__(self, num_classes: int = 2, k: int = 4, momentum: float = 0.1):
        super().__init__()
        self.num_classes = num_classes
        self.k = k
        self.proj = nn.Conv3d(num_classes, k, 1)
        self.norm = nn.BatchNorm3d(k, eps=NORM_EPS, affine=False, momentum=momentum)

    def forward(self, labels):
        check_divisible(labels.shape[-3:], self.stride, "label patch")
        x = one_hot(labels, self.num_classes, self.proj.weight.dtype)
        return check_finite(self.norm(self.proj(F.avg_pool3d(x, self.stride))), "z_l0")


class SimpleLabelDecoder(nn.Module):
    stride = 4

    def __init__(self, num_classes: int = 2, k: int = 4):
        super().__init__()
        self.k = k
        self.num_classes = num_classes
        self.proj = nn.Conv3d(k, num_classes, 1)

    def logits(self, z):
        if z.shape[1] != self.k:
            raise ShapeError(f"latent has {z.shape[1]} channels, decoder expects {self.k}")
        return F.interpolate(self.proj(z), scale_factor=self.stride, mode="trilinear", align_corners=False)

    def forward(self, z):
        return self.logits(z).softmax(dim=1)


class LabelCodec(nn.Module):
    """Encoder/decoder pair. In training mode ``encode`` also tracks a moving
    average of the per-channel latent extremes, which bounds the sampler."""

    range_momentum = 0.05

    def __init__(self, num_classes: int = 2, k: int = 4, widths=(8, 16), simple: bool = False):
        super().__init__()
        self.register_buffer("latent_min", torch.zeros(k))
        self.register_buffer("latent_max", torch.zeros(k))
        self.register_buffer("range_seen", torch.zeros((), dtype=torch.long))
        self.num_classes = num_classes
        self.k = k
        self.stride = 4
        if simple:
            self.encoder = SimpleLabelEncoder(num_classes, k)
            self.decoder = SimpleLabelDecoder(num_classes, k)
        else:
            self.encoder = LabelEncoder(num_classes, k, widths)
            self.decoder = LabelDecoder(num_classes, k, widths)

    def encode(self, labels: torch.Tensor) -> torch.Tensor:
        z = self.encoder(labels)
        if self.training:
            self._track_range(z.detach())
        return z

    @torch.no_grad()
    def _track_range(self, z: torch.Tensor) -> None:
        lo = z.transpose(0, 1).reshape(self.k, -1).amin(1).to(self.latent_min.dtype)
        hi = z.transpose(0, 1).reshape(self.k, -1).amax(1).to(self.latent_max.dtype)
        if self.range_seen == 0:
            self.latent_min.copy_(lo)
            self.latent_max.copy_(hi)
        else:
            m = self.range_momentum
            self.latent_min.lerp_(lo, m)
            self.latent_max.lerp_(hi, m)
        self.range_seen += 1

    def latent_range(self, margin: float = 0.0) -> tuple[torch.Tensor, torch.Tensor] | None:
        """(min, max) broadcastable against (B, k, d, h, w), each pushed out
        by ``margin`` times the channel's width; None before any
        training-mode encode."""
        if self.range_seen == 0:
            return None
        lo, hi = self.latent_min.view(1, -1, 1, 1, 1), self.latent_max.view(1, -1, 1, 1, 1)
        pad = margin * (hi - lo)
        return lo - pad, hi + pad

    def decode(self, z: torch.Tensor, out_shape=None) -> torch.Tensor:
        _check_out_shape(z, out_shape, self.stride)
        return self.decoder(z)

    def decode_logits(self, z: torch.Tensor, out_shape=None) -> torch.Tensor:
        _check_out_shape(z, out_shape, self.stride)
        return self.decoder.logits(z)

    def forward(self, labels):
        return self.decode(self.encode(labels))


def _check_out_shape(z, out_shape, stride):
    if z.dim() != 5:
        raise ShapeError(f"latent must be (B, k, d, h, w), got {tuple(z.shape)}")
    if out_shape is not None and tuple(s * stride for s in z.shape[2:]) != tuple(out_shape):
        raise ShapeError(f"latent grid {tuple(z.shape[2:])} x stride {stride} != requested {tuple(out_shape)}")


def encode_label(labels, codec: LabelCodec) -> LabelLatent:
    return LabelLatent(codec.encode(torch.as_tensor(labels)), normalized=True)


def decode_label(latent: LabelLatent | torch.Tensor, codec: LabelCodec, out_shape=None) -> torch.Tensor:
    z = latent.values if isinstance(latent, LabelLatent) else latent
    return codec.decode(z, out_shape)
