"""Dice and normalized surface distance (NSD), each with an exhaustive
reference implementation for small volumes.

Boundary voxels are foreground voxels with at least one face-adjacent
background or out-of-bounds neighbour; distances are measured between voxel
centers in mm.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError, ValidationError

DEFAULT_TOLERANCE_MM = 1.0
# distance ties at exactly tau must not depend on rounding in either path
_TIE_EPS = 1e-9
_FACE = ndimage.generate_binary_structure(3, 1)


def _pair(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return pred, target


def dice(pred, target, cls: int = 1) -> float:
    pred, target = _pair(pred, target)
    p, t = pred == cls, target == cls
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACE, border_value=0)


def _surface_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance from every voxel of ``src`` to the nearest voxel of ``dst``."""
    edt = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return edt[src]


def nsd(pred, target, cls: int = 1, tolerance_mm: float = DEFAULT_TOLERANCE_MM,
        spacing=(1.0, 1.0, 1.0)) -> float:
    if tolerance_mm < 0:
        raise ValidationError(f"tolerance must be >= 0, got {tolerance_mm}")
    pred, target = _pair(pred, target)
    bp, bt = boundary(pred == cls), boundary(target == cls)
    n_p, n_t = int(bp.sum()), int(bt.sum())
    if n_p == 0 and n_t == 0:
        return 1.0
    if n_p == 0 or n_t == 0:
        return 0.0
    spacing = tuple(float(s) for s in spacing)
    tol = tolerance_mm + _TIE_EPS
    hits = int((_surface_distances(bp, bt, spacing) <= tol).sum())
    hits += int((_surface_distances(bt, bp, spacing) <= tol).sum())
    return hits / (n_p + n_t)


# -- exhaustive references -----------------------------------------------------

def dice_bruteforce(pred, target, cls: int = 1) -> float:
    pred, target = _pair(pred, target)
    inter = n_p = n_t = 0
    for p, t in zip(pred.ravel().tolist(), target.ravel().tolist()):
        n_p += p == cls
        n_t += t == cls
        inter += p == cls and t == cls
    return 1.0 if n_p + n_t == 0 else 2.0 * inter / (n_p + n_t)


def boundary_bruteforce(mask: np.ndarray) -> list[tuple[int, int, int]]:
    mask = np.asarray(mask, dtype=bool)
    dims = mask.shape
    steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    out = []
    for idx in itertools.product(*(range(d) for d in dims)):
        if not mask[idx]:
            continue
        for s in steps:
            nb = tuple(i + o for i, o in zip(idx, s))
            if any(n < 0 or n >= d for n, d in zip(nb, dims)) or not mask[nb]:
                out.append(idx)
                break
    return out


def nsd_bruteforce(pred, target, cls: int = 1, tolerance_mm: float = DEFAULT_TOLERANCE_MM,
                   spacing=(1.0, 1.0, 1.0)) -> float:
    if tolerance_mm < 0:
        raise ValidationError(f"tolerance must be >= 0, got {tolerance_mm}")
    pred, target = _pair(pred, target)
    bp = np.array(boundary_bruteforce(pred == cls), dtype=np.float64).reshape(-1, 3)
    bt = np.array(boundary_bruteforce(target == cls), dtype=np.float64).reshape(-1, 3)
    if len(bp) == 0 and len(bt) == 0:
        return 1.0
    if len(bp) == 0 or len(bt) == 0:
        return 0.0
    sp = np.asarray(spacing, dtype=np.float64)
    diff = (bp[:, None, :] - bt[None, :, :]) * sp
    d = np.sqrt((diff**2).sum(-1))
    tol = tolerance_mm + _TIE_EPS
    hits = int((d.min(axis=1) <= tol).sum()) + int((d.min(axis=0) <= tol).sum())
    return hits / (len(bp) + len(bt))


@dataclass
class MetricReport:
    dice: dict[int, float]
    nsd: dict[int, float]
    tolerance_mm: float

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    @property
    def mean_nsd(self) -> float:
        return float(np.mean(list(self.nsd.values())))


def evaluate(pred, target, num_classes: int = 2, spacing=(1.0, 1.0, 1.0),
             tolerance_mm: float = DEFAULT_TOLERANCE_MM) -> MetricReport:
    """Per-foreground-class Dice and NSD."""
    classes = range(1, max(num_classes, 2))
    return MetricReport(
        {c: dice(pred, target, c) for c in classes},
        {c: nsd(pred, target, c, tolerance_mm, spacing) for c in classes},
        tolerance_mm,
    )
