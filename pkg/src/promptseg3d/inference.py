"""Sliding-window prediction of whole volumes."""
from __future__ import annotations

import hashlib
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import StateError, ValidationError
from .model import CLAMP_MARGIN
from .volume.core import Volume3D
from .volume.io import save_volume

KERNELS = ("uniform", "gaussian")


@dataclass
class TilingPlan:
    dims: tuple[int, int, int]
    size: tuple[int, int, int]
    overlap: float
    axis_origins: list[list[int]]
    kernel: np.ndarray = field(repr=False)

    @property
    def origins(self) -> list[tuple[int, int, int]]:
        return list(itertools.product(*self.axis_origins))

    def __len__(self):
        return int(np.prod([len(a) for a in self.axis_origins]))

    def coverage(self) -> np.ndarray:
        cov = np.zeros(self.dims, dtype=np.int32)
        for o in self.origins:
            cov[tuple(slice(a, a + s) for a, s in zip(o, self.size))] += 1
        return cov

    def summary(self) -> str:
        return f"{len(self)} tiles of {'x'.join(map(str, self.size))}, overlap {self.overlap}"


def _axis_origins(dim: int, size: int, overlap: float) -> list[int]:
    step = max(1, math.ceil(size * (1.0 - overlap)))
    origins, o = [], 0
    while o + size < dim:
        origins.append(o)
        o += step
    origins.append(dim - size)  # last tile touches the boundary
    return sorted(set(origins))


def weight_kernel(size, kind: str = "uniform", sigma_scale: float = 0.125) -> np.ndarray:
    if kind == "uniform":
        return np.ones(size, dtype=np.float64)
    if kind == "gaussian":
        axes = [np.exp(-0.5 * ((np.arange(s) - (s - 1) / 2) / (sigma_scale * s)) ** 2) for s in size]
        k = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
        return k / k.max()
    raise ValidationError(f"unknown weight kernel {kind!r}; expected one of {KERNELS}")


def plan_tiles(dims, tile_size, overlap: float = 0.5, kernel: str = "uniform") -> TilingPlan:
    dims, size = tuple(int(d) for d in dims), tuple(int(s) for s in tile_size)
    if len(dims) != 3 or len(size) != 3:
        raise ValidationError("dims and tile size must have three axes")
    if any(s > d for s, d in zip(size, dims)):
        raise ValidationError(f"tile {size} larger than volume {dims}; need dims >= tile size on every axis")
    if not 0 <= overlap < 1:
        raise ValidationError(f"overlap must lie in [0, 1), got {overlap}")
    axis = [_axis_origins(d, s, overlap) for d, s in zip(dims, size)]
    return TilingPlan(dims, size, overlap, axis, weight_kernel(size, kernel))


def aggregate(plan: TilingPlan, tile_probs) -> np.ndarray:
    """Kernel-weighted average of per-tile (N, *size) probability fields,
    accumulated in plan order."""
    tile_probs = list(tile_probs)
    if len(tile_probs) != len(plan):
        raise ValidationError(f"{len(tile_probs)} tile fields for a plan of {len(plan)} tiles")
    n = tile_probs[0].shape[0]
    acc = np.zeros((n, *plan.dims), dtype=np.float64)
    wsum = np.zeros(plan.dims, dtype=np.float64)
    for origin, probs in zip(plan.origins, tile_probs):
        sl = tuple(slice(a, a + s) for a, s in zip(origin, plan.size))
        acc[(slice(None),) + sl] += plan.kernel * np.asarray(probs, dtype=np.float64)
        wsum[sl] += plan.kernel
    return acc / wsum


def tile_seed(seed: int, origin) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{','.join(map(str, origin))}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class SegmentationResult:
    probabilities: np.ndarray  # (N, D, H, W)
    mask: np.ndarray  # (D, H, W) int
    metadata: dict


def predict_volume(image, prompt, model, steps: int = 10, seed: int = 0, tile_size=None, overlap: float = 0.5,
                   kernel: str = "uniform", workers: int = 1, checkpoint_id: str = "unknown",
                   clamp_latents: bool = True, clamp_margin: float = CLAMP_MARGIN) -> SegmentationResult:
    """Tile the volume, run conditional DDIM + decoding per tile and average
    the tile probability fields."""
    if model is None:
        raise StateError("no model loaded")
    vol = image.data if isinstance(image, Volume3D) else np.asarray(image, dtype=np.float32)
    tile_size = tuple(tile_size or vol.shape)
    plan = plan_tiles(vol.shape, tile_size, overlap, kernel)
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        text = model.encode_text([prompt])

    def run(origin):
        sl = tuple(slice(a, a + s) for a, s in zip(origin, plan.size))
        x = torch.as_tensor(np.ascontiguousarray(vol[sl]), dtype=dtype)[None, None]
        p = model.sample_probs(x, text, steps=steps, seed=tile_seed(seed, origin),
                               clamp_latents=clamp_latents, clamp_margin=clamp_margin)
        return p[0].cpu().numpy()

    origins = plan.origins
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            fields = list(pool.map(run, origins))
    else:
        fields = [run(o) for o in origins]
    probs = fields[0].astype(np.float64) if len(plan) == 1 else aggregate(plan, fields)
    meta = {
        "checkpoint_id": checkpoint_id,
        "steps": steps,
        "seed": seed,
        "tiling": plan.summary(),
        "kernel": kernel,
        "clamp_latents": clamp_latents,
        "clamp_margin": clamp_margin,
        "variant": model.cfg.variant,
    }
    return SegmentationResult(probs, probs.argmax(0).astype(np.int64), meta)


def write_metadata(meta: dict, path) -> None:
    Path(path).write_text("".join(f"{k}: {v}\n" for k, v in meta.items()), encoding="utf-8")


def read_metadata(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition(":")
            out[key.strip()] = value.strip()
    return out


def write_result(result: SegmentationResult, out_dir, case_id: str, spacing=(1.0, 1.0, 1.0),
                 write_probs: bool = False) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = result.probabilities.shape[0]
    paths = [out_dir / f"{case_id}_mask.tdsv", out_dir / f"{case_id}_meta.txt"]
    save_volume(Volume3D.label(result.mask, n, spacing), paths[0])
    write_metadata(dict(result.metadata, case_id=case_id, num_classes=n), paths[1])
    if write_probs:
        for c in range(n):
            p = out_dir / f"{case_id}_prob{c}.tdsv"
            save_volume(Volume3D.intensity(result.probabilities[c], spacing), p)
            paths.append(p)
    return paths
