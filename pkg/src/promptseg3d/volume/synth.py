"""Synthetic annotated scenes: geometric objects in noise with a text prompt
naming the target.

A voxel belongs to a shape iff its center (integer index coordinates) lies
inside the continuous shape, boundary included.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import SpecError
from ..text.prompt import TextPrompt
from .core import AnnotatedCase, Volume3D

SHAPES = ("sphere", "cuboid", "ellipsoid")
SHAPE_WORDS = {"sphere": "spherical", "cuboid": "cuboid", "ellipsoid": "ellipsoidal"}
DEFAULT_TEMPLATE = "segment the {shape} lesion in the {location} region"


@dataclass
class ObjectSpec:
    shape: str
    size: tuple[float, float] = (5.0, 7.0)  # radius / half-extent range in voxels
    center: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SpecError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        lo, hi = self.size
        if not 0 < lo <= hi:
            raise SpecError(f"invalid size range {self.size}")


@dataclass
class SceneSpec:
    objects: list[ObjectSpec]
    dims: tuple[int, int, int] = (32, 32, 32)
    target: int | None = 0  # None draws the target uniformly
    intensity: tuple[float, float] = (0.8, 1.2)  # shared by every object
    background: float = 0.0
    noise_std: float = 0.1
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    template: str = DEFAULT_TEMPLATE
    margin: float = 1.0
    max_tries: int = 200

    def __post_init__(self):
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        if not 1 <= len(self.objects) <= 3:
            raise SpecError(f"scenes hold 1-3 objects, got {len(self.objects)}")
        if self.target is not None and not 0 <= self.target < len(self.objects):
            raise SpecError(f"target index {self.target} out of range")


@dataclass
class PlacedObject:
    shape: str
    center: np.ndarray
    semi_axes: np.ndarray
    intensity: float = 1.0
    mask: np.ndarray | None = field(default=None, repr=False)


def shape_mask(shape: str, center, semi_axes, dims) -> np.ndarray:
    grid = np.indices(dims, dtype=np.float64)
    rel = [(grid[a] - center[a]) for a in range(3)]
    if shape == "cuboid":
        return np.all([np.abs(rel[a]) <= semi_axes[a] for a in range(3)], axis=0)
    # sphere is the isotropic ellipsoid
    q = sum((rel[a] / semi_axes[a]) ** 2 for a in range(3))
    return q <= 1.0


def _draw_semi_axes(obj: ObjectSpec, rng) -> np.ndarray:
    lo, hi = obj.size
    if obj.shape == "sphere":
        return np.full(3, rng.uniform(lo, hi))
    return rng.uniform(lo, hi, size=3)


def _boxes_clear(a: PlacedObject, b: PlacedObject, margin: float) -> bool:
    gap = np.abs(a.center - b.center) - a.semi_axes - b.semi_axes
    return bool(np.any(gap >= margin))


def _place(spec: SceneSpec, rng) -> list[PlacedObject]:
    dims = np.asarray(spec.dims, dtype=np.float64)
    placed: list[PlacedObject] = []
    for obj in spec.objects:
        axes = _draw_semi_axes(obj, rng)
        lo = np.ceil(axes)
        hi = dims - 1 - np.ceil(axes)
        if np.any(hi < lo):
            raise SpecError(f"{obj.shape} with semi-axes {axes.round(2)} does not fit in {spec.dims}")
        for _ in range(spec.max_tries):
            if obj.center is not None:
                center = np.asarray(obj.center, dtype=np.float64)
                if np.any(center - axes < 0) or np.any(center + axes > dims - 1):
                    raise SpecError(f"{obj.shape} at {obj.center} extends outside the volume")
            else:
                center = rng.uniform(lo, hi)
            cand = PlacedObject(obj.shape, center, axes)
            if all(_boxes_clear(cand, p, spec.margin) for p in placed):
                placed.append(cand)
                break
            if obj.center is not None:
                raise SpecError(f"{obj.shape} at {obj.center} overlaps another object")
        else:
            raise SpecError(f"could not place {obj.shape} without overlap after {spec.max_tries} tries")
    return placed


def location_word(center, dims) -> str:
    mid = (np.asarray(dims, dtype=np.float64) - 1) / 2
    # invariant under axis flips and 90 degree rotations of a cubic volume
    return "central" if np.linalg.norm(np.asarray(center) - mid) <= 0.25 * min(dims) else "peripheral"


def prompt_for(obj: PlacedObject, dims, template: str = DEFAULT_TEMPLATE) -> TextPrompt:
    text = template.format(shape=SHAPE_WORDS[obj.shape], location=location_word(obj.center, dims))
    return TextPrompt(text)


def synth_case(rng_seed: int, scene_spec: SceneSpec, case_id: str | None = None) -> AnnotatedCase:
    """Render a scene deterministically from ``(rng_seed, scene_spec)``.

    ``case.meta["objects"]`` keeps every placed object with its mask so
    callers can re-target the same image with a different prompt.
    """
    rng = np.random.default_rng(rng_seed)
    spec = scene_spec
    placed = _place(spec, rng)
    target = spec.target if spec.target is not None else int(rng.integers(len(placed)))

    dims = tuple(spec.dims)
    image = np.full(dims, spec.background, dtype=np.float64)
    for obj in placed:
        obj.mask = shape_mask(obj.shape, obj.center, obj.semi_axes, dims)
        obj.intensity = float(rng.uniform(*spec.intensity))
        image[obj.mask] = obj.intensity
    if spec.noise_std > 0:
        image += rng.normal(0.0, spec.noise_std, size=dims)

    label = placed[target].mask.astype(np.float32)
    case = AnnotatedCase(
        image=Volume3D.intensity(image.astype(np.float32), spec.spacing),
        label=Volume3D.label(label, 2, spec.spacing),
        prompt=prompt_for(placed[target], dims, spec.template),
        case_id=case_id or f"case{rng_seed:05d}",
        meta={"objects": placed, "target": target, "seed": rng_seed},
    )
    return case


def single_object_scene(shape: str = "sphere", size=(5.0, 7.0), **kw) -> SceneSpec:
    return SceneSpec(objects=[ObjectSpec(shape, tuple(size))], **kw)


def two_object_scene(shapes=("sphere", "cuboid"), template="segment the {shape} lesion", **kw) -> SceneSpec:
    """Two objects of different shapes and identical intensity statistics;
    the prompt is the only cue naming the target."""
    kw.setdefault("target", None)
    kw.setdefault("objects", [ObjectSpec(shapes[0], (5.0, 6.5)), ObjectSpec(shapes[1], (3.0, 4.0))])
    return SceneSpec(template=template, **kw)
