"""Segmentation loss (cross-entropy + soft Dice), denoiser MSE and their
weighted total."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError, ValidationError

DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        for name in ("gamma", "lam"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    l_ce: float
    l_dsc: float
    l1: float
    l2: float
    total: float
    dice: list[float] = field(default_factory=list)
    lr: float = 0.0

    def as_row(self) -> dict:
        return {"l_ce": self.l_ce, "l_dsc": self.l_dsc, "l1": self.l1, "l2": self.l2, "total": self.total}


def _targets(target: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    # accept (D,H,W) with (N,D,H,W) probs, or batched (B,D,H,W) with (B,N,D,H,W)
    if target.dim() == probs.dim() - 1 and probs.dim() == 4:
        probs, target = probs[None], target[None]
    if target.shape != probs.shape[:1] + probs.shape[2:]:
        raise ShapeError(f"target {tuple(target.shape)} does not match predictions {tuple(probs.shape)}")
    return probs, target.long()


def soft_dice_per_class(probs: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """(N,) soft Dice scores, sums taken over batch and voxels."""
    probs, target = _targets(target, probs)
    n = probs.shape[1]
    onehot = F.one_hot(target, n).permute(0, 4, 1, 2, 3).to(probs.dtype)
    dims = (0, 2, 3, 4)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return (2 * inter + smooth) / (denom + smooth)


def _segmentation_terms(log_probs, probs, target, gamma, smooth):
    probs, target = _targets(target, probs)
    log_probs = log_probs if log_probs.dim() == probs.dim() else log_probs[None]
    l_ce = F.nll_loss(log_probs, target)
    dice = soft_dice_per_class(probs, target, smooth)
    fg = dice[1:] if dice.numel() > 1 else dice
    l_dsc = 1.0 - fg.mean()
    return l_ce, l_dsc, l_ce + gamma * l_dsc, dice


def segmentation_loss(probs: torch.Tensor, target: torch.Tensor, gamma: float = 1.0,
                      smooth: float = DICE_SMOOTH, return_dice: bool = False):
    """Return ``(l_ce, l_dsc, l1)`` for class probabilities ``probs``
    (class axis 1, or 0 when unbatched) and integer ``target``.

    Dice is averaged over foreground classes only.
    """
    cls_axis = 0 if probs.dim() == 4 else 1
    dev = (probs.sum(cls_axis) - 1).abs().max()
    if dev > 1e-4 or probs.min() < -1e-4:
        raise ValidationError(f"predictions are off the probability simplex by {float(dev):.3g}")
    log_probs = torch.log(probs.clamp_min(torch.finfo(probs.dtype).tiny))
    l_ce, l_dsc, l1, dice = _segmentation_terms(log_probs, probs, target, gamma, smooth)
    return (l_ce, l_dsc, l1, dice) if return_dice else (l_ce, l_dsc, l1)


def segmentation_loss_from_logits(logits: torch.Tensor, target: torch.Tensor, gamma: float = 1.0,
                                  smooth: float = DICE_SMOOTH):
    """Same as :func:`segmentation_loss` but numerically stable in the logits."""
    log_probs = logits.log_softmax(dim=1)
    return _segmentation_terms(log_probs, log_probs.exp(), target, gamma, smooth)


def make_report(l_ce: float, l_dsc: float, l2: float, weights: LossWeights, dice=()) -> LossReport:
    """Assemble a report whose composite terms are recomputed in float64, so
    the identities ``l1 = l_ce + gamma l_dsc`` and ``total = l1 + lam l2``
    hold to double precision regardless of the tensor dtype."""
    l1 = l_ce + weights.gamma * l_dsc
    return LossReport(l_ce, l_dsc, l1, l2, l1 + weights.lam * l2, list(dice))


def denoiser_loss(predicted: torch.Tensor, true: torch.Tensor) -> torch.Tensor:
    if predicted.shape != true.shape:
        raise ShapeError(f"predicted noise {tuple(predicted.shape)} != true noise {tuple(true.shape)}")
    return ((predicted - true) ** 2).mean()


def total_loss(l1, l2, weights: LossWeights = LossWeights()):
    return l1 + weights.lam * l2
