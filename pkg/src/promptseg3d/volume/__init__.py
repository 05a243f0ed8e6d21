from .augment import AugmentPolicy, GeometricTransform, augment, draw_transform
from .core import AnnotatedCase, PatchSpec, Volume3D, VolumeKind, sample_patch
from .io import NIFTI_AVAILABLE, load_volume, save_volume
from .synth import ObjectSpec, SceneSpec, single_object_scene, synth_case, two_object_scene

__all__ = [
    "AnnotatedCase", "AugmentPolicy", "GeometricTransform", "NIFTI_AVAILABLE", "ObjectSpec",
    "PatchSpec", "SceneSpec", "Volume3D", "VolumeKind", "augment", "draw_transform",
    "load_volume", "sample_patch", "save_volume", "single_object_scene", "synth_case",
    "two_object_scene",
]
