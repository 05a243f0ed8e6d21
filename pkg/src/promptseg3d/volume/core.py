from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, ValidationError
from ..text.prompt import TextPrompt


class VolumeKind(enum.IntEnum):
    INTENSITY = 0
    LABEL = 1


@dataclass
class Volume3D:
    """Dense scalar field on a D x H x W grid.

    Label volumes store integer class ids (kept as float32 for a uniform
    payload) in ``[0, num_classes - 1]``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: VolumeKind = VolumeKind.INTENSITY
    num_classes: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.kind = VolumeKind(self.kind)
        self.validate()

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValidationError(f"all dims must be >= 1, got {self.data.shape}")
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise ValidationError(f"spacing must be > 0 on every axis, got {self.spacing}")
        if self.kind == VolumeKind.LABEL:
            if self.num_classes < 1:
                raise ValidationError("label volumes need num_classes >= 1")
            d = self.data
            if not np.all(d == np.round(d)) or d.min() < 0 or d.max() > self.num_classes - 1:
                raise ValidationError(
                    f"label values must be integers in [0, {self.num_classes - 1}]"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def labels(self) -> np.ndarray:
        return self.data.astype(np.int64)

    @classmethod
    def label(cls, data, num_classes: int, spacing=(1.0, 1.0, 1.0)) -> "Volume3D":
        return cls(np.asarray(data, dtype=np.float32), spacing, VolumeKind.LABEL, num_classes)

    @classmethod
    def intensity(cls, data, spacing=(1.0, 1.0, 1.0)) -> "Volume3D":
        return cls(np.asarray(data, dtype=np.float32), spacing, VolumeKind.INTENSITY, 0)


@dataclass
class AnnotatedCase:
    image: Volume3D
    label: Volume3D
    prompt: TextPrompt
    case_id: str = "case"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ShapeError(f"image {self.image.shape} and label {self.label.shape} differ")
        if not np.allclose(self.image.spacing, self.label.spacing):
            raise ValidationError("image and label spacing differ")
        if self.label.kind != VolumeKind.LABEL:
            raise ValidationError("case label must be a label volume")


@dataclass(frozen=True)
class PatchSpec:
    size: tuple[int, int, int]
    origin: tuple[int, int, int]

    def check(self, dims) -> None:
        for o, s, d in zip(self.origin, self.size, dims):
            if o < 0 or s < 1 or o + s > d:
                raise ValidationError(f"patch {self} does not fit in dims {tuple(dims)}")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))


def sample_patch(case: AnnotatedCase, size, rng: np.random.Generator):
    """Cut an image/label patch pair from a uniformly drawn origin."""
    size = tuple(int(s) for s in size)
    dims = case.image.shape
    if len(size) != 3 or any(s > d or s < 1 for s, d in zip(size, dims)):
        raise ValidationError(f"patch size {size} exceeds volume dims {dims}")
    origin = tuple(int(rng.integers(0, d - s + 1)) for s, d in zip(size, dims))
    spec = PatchSpec(size, origin)
    sl = spec.slices
    return case.image.data[sl].copy(), case.label.data[sl].copy(), spec

