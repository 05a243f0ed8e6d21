from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AugmentPolicy:
    flip: bool = True
    rotate: bool = True
    scale: bool = True
    shift: bool = True
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    shift_range: tuple[float, float] = (-0.1, 0.1)

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(flip=False, rotate=False, scale=False, shift=False)


@dataclass(frozen=True)
class GeometricTransform:
    """Axis flips applied first, then ``k`` quarter turns in the ``axes`` plane."""

    flips: tuple[int, ...] = ()
    k: int = 0
    axes: tuple[int, int] = (0, 1)

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = arr
        for ax in self.flips:
            out = np.flip(out, axis=ax)
        if self.k % 4:
            out = np.rot90(out, k=self.k, axes=self.axes)
        return np.ascontiguousarray(out)

    def invert(self, arr: np.ndarray) -> np.ndarray:
        out = arr
        if self.k % 4:
            out = np.rot90(out, k=-self.k, axes=self.axes)
        for ax in reversed(self.flips):
            out = np.flip(out, axis=ax)
        return np.ascontiguousarray(out)


# quarter turns about axis a happen in the plane of the other two axes
ROTATION_PLANES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}


def draw_transform(shape, policy: AugmentPolicy, rng: np.random.Generator) -> GeometricTransform:
    flips: tuple[int, ...] = ()
    if policy.flip:
        flips = tuple(ax for ax in range(3) if rng.random() < policy.flip_prob)
    k, axes = 0, (0, 1)
    if policy.rotate and rng.random() < policy.rotate_prob:
        about = int(rng.integers(3))
        axes = ROTATION_PLANES[about]
        # non-square planes would change the patch shape
        if shape[axes[0]] == shape[axes[1]]:
            k = int(rng.integers(1, 4))
    return GeometricTransform(flips, k, axes)


def augment(image: np.ndarray, label: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator):
    """Apply one random geometric transform to both arrays and intensity
    jitter to the image only."""
    g = draw_transform(image.shape, policy, rng)
    image = g.apply(image)
    label = g.apply(label)
    if policy.scale:
        image = image * np.float32(rng.uniform(*policy.scale_range))
    if policy.shift:
        image = image + np.float32(rng.uniform(*policy.shift_range))
    return image.astype(np.float32, copy=False), label
