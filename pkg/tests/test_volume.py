import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from promptseg3d.errors import FormatError, FormatUnavailableError, SpecError, ValidationError
from promptseg3d.text import TextPrompt
from promptseg3d.volume import (AnnotatedCase, AugmentPolicy, GeometricTransform, ObjectSpec, SceneSpec,
                                Volume3D, augment, load_volume, sample_patch, save_volume, single_object_scene,
                                synth_case, two_object_scene)
from promptseg3d.volume import io as vio


def test_roundtrip_zero_volume(tmp_path):
    vol = Volume3D.intensity(np.zeros((4, 4, 4)))
    save_volume(vol, tmp_path / "z.tdsv")
    back = load_volume(tmp_path / "z.tdsv")
    assert np.array_equal(back.data, vol.data)
    assert back.spacing == vol.spacing


def _hand_raw(dims, values, spacing=(1.0, 1.0, 1.0), kind=0, ncls=0):
    head = b"TDSV1" + struct.pack("<3I", *dims) + struct.pack("<3f", *spacing) + bytes([kind]) + struct.pack("<H", ncls)
    return head + b"".join(struct.pack("<f", v) for v in values)


def test_hand_written_file_is_z_major(tmp_path):
    vals = [float(v) for v in range(8)]
    (tmp_path / "h.tdsv").write_bytes(_hand_raw((2, 2, 2), vals, (0.5, 1.0, 2.0)))
    vol = load_volume(tmp_path / "h.tdsv")
    assert vol.shape == (2, 2, 2)
    assert vol.spacing == (0.5, 1.0, 2.0)
    for n, (z, y, x) in enumerate(itertools.product(range(2), repeat=3)):
        assert vol.data[z, y, x] == vals[n]


def test_truncated_payload(tmp_path):
    (tmp_path / "t.tdsv").write_bytes(_hand_raw((2, 2, 2), [0.0] * 7))
    with pytest.raises(FormatError):
        load_volume(tmp_path / "t.tdsv")


@pytest.mark.parametrize("dims,spacing", [((0, 2, 2), (1, 1, 1)), ((2, 2, 2), (1, 0, 1)), ((2, 2, 2), (1, -1, 1))])
def test_nonpositive_header_rejected(tmp_path, dims, spacing):
    n = int(np.prod(dims))
    (tmp_path / "b.tdsv").write_bytes(_hand_raw(dims, [0.0] * n, spacing))
    with pytest.raises(ValidationError):
        load_volume(tmp_path / "b.tdsv")


def test_bad_magic(tmp_path):
    raw = bytearray(_hand_raw((1, 1, 1), [1.0]))
    raw[0:5] = b"XXXXX"
    (tmp_path / "m.tdsv").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_volume(tmp_path / "m.tdsv")


def test_label_volume_roundtrip_keeps_kind(tmp_path):
    lab = Volume3D.label(np.array([[[0, 1], [2, 1]]]), 3, (2.0, 1.0, 1.0))
    save_volume(lab, tmp_path / "l.tdsv")
    back = load_volume(tmp_path / "l.tdsv")
    assert back.kind == lab.kind and back.num_classes == 3
    assert np.array_equal(back.labels(), lab.labels())


def test_label_invariants():
    with pytest.raises(ValidationError):
        Volume3D.label(np.array([[[0, 2]]]), 2)
    with pytest.raises(ValidationError):
        Volume3D.label(np.array([[[0, 0.5]]]), 2)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_raw_roundtrip_bit_exact(arr):
    vol = Volume3D.intensity(arr)
    back = vio.decode_raw(vio.encode_raw(vol))
    assert back.data.tobytes() == vol.data.tobytes()


def test_nifti_unavailable(tmp_path, monkeypatch):
    p = tmp_path / "x.nii.gz"
    p.write_bytes(b"\0")
    monkeypatch.setattr(vio, "NIFTI_AVAILABLE", False)
    with pytest.raises(FormatUnavailableError, match="unavailable"):
        load_volume(p, "nifti")


def test_nifti_read(tmp_path):
    nib = pytest.importorskip("nibabel")
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)  # (x, y, z)
    img = nib.Nifti1Image(arr, np.diag([0.5, 0.75, 2.0, 1.0]))
    nib.save(img, tmp_path / "v.nii.gz")
    vol = load_volume(tmp_path / "v.nii.gz", "nifti")
    assert vol.shape == (4, 3, 2)
    assert vol.spacing == (2.0, 0.75, 0.5)
    assert vol.data[3, 2, 1] == arr[1, 2, 3]


# -- synthesis -------------------------------------------------------------------

def _lattice_ball_count(r):
    n = int(np.floor(r))
    return sum(1 for x, y, z in itertools.product(range(-n, n + 1), repeat=3) if x * x + y * y + z * z <= r * r)


def test_centered_sphere_voxel_count():
    scene = SceneSpec([ObjectSpec("sphere", (4, 4), center=(16, 16, 16))], dims=(32, 32, 32))
    case = synth_case(7, scene)
    assert _lattice_ball_count(4) == 257
    assert int(case.label.data.sum()) == 257
    again = synth_case(7, scene)
    assert np.array_equal(case.image.data, again.image.data)
    assert case.prompt == again.prompt


def test_two_object_scene_label_is_prompted_object():
    scene = two_object_scene(target=0)
    case = synth_case(3, scene)
    assert case.prompt.text == "segment the spherical lesion"
    sphere, cube = case.meta["objects"]
    lab = case.label.data.astype(bool)
    assert np.array_equal(lab, sphere.mask)
    assert not np.any(lab & cube.mask)


def test_two_object_scene_shares_intensity_distribution():
    scene = two_object_scene()
    assert all(o.shape in ("sphere", "cuboid") for o in scene.objects)
    # one intensity range for the whole scene; draws for both objects come from it
    lo, hi = scene.intensity
    case = synth_case(11, scene)
    for obj in case.meta["objects"]:
        assert lo <= obj.intensity <= hi


def test_random_target_is_deterministic():
    scene = two_object_scene()
    targets = {synth_case(s, scene).meta["target"] for s in range(20)}
    assert targets == {0, 1}
    assert synth_case(5, scene).meta["target"] == synth_case(5, scene).meta["target"]


def test_object_too_large():
    with pytest.raises(SpecError):
        synth_case(0, single_object_scene("sphere", dims=(8, 8, 8)))
    with pytest.raises(SpecError):
        SceneSpec([ObjectSpec("sphere")] * 4)


def test_default_prompt_names_shape_and_location():
    case = synth_case(0, SceneSpec([ObjectSpec("cuboid", (4, 4), center=(15.5, 15.5, 15.5))]))
    assert case.prompt.text == "segment the cuboid lesion in the central region"


# -- patches ---------------------------------------------------------------------

def _case(dims=(32, 32, 32)):
    img = np.arange(np.prod(dims), dtype=np.float32).reshape(dims)
    lab = Volume3D.label((img % 3 == 0).astype(np.float32), 2)
    return AnnotatedCase(Volume3D.intensity(img), lab, TextPrompt("segment the sphere"))


def test_patch_full_size(rng):
    case = _case((8, 6, 4))
    img, lab, spec = sample_patch(case, (8, 6, 4), rng)
    assert spec.origin == (0, 0, 0)
    assert np.array_equal(img, case.image.data) and np.array_equal(lab, case.label.data)


def test_patch_origin_range_and_alignment(rng):
    case = _case()
    for _ in range(50):
        img, lab, spec = sample_patch(case, (16, 16, 16), rng)
        assert all(0 <= o <= 16 for o in spec.origin)
        assert np.array_equal(img, case.image.data[spec.slices])
        assert np.array_equal(lab, case.label.data[spec.slices])


def test_patch_too_large(rng):
    with pytest.raises(ValidationError):
        sample_patch(_case((8, 8, 8)), (9, 8, 8), rng)


def test_patch_origin_uniform():
    case = _case()
    g = np.random.default_rng(99)
    origins = np.array([sample_patch(case, (16, 16, 16), g)[2].origin for _ in range(10_000)])
    flat = origins[:, 0] * 289 + origins[:, 1] * 17 + origins[:, 2]
    counts = np.bincount(flat, minlength=17**3)
    assert stats.chisquare(counts).pvalue > 1e-3
    for ax in range(3):
        assert stats.chisquare(np.bincount(origins[:, ax], minlength=17)).pvalue > 1e-3


# -- augmentation ----------------------------------------------------------------

def test_flip_is_involution(rng):
    x = rng.normal(size=(4, 5, 6)).astype(np.float32)
    g = GeometricTransform(flips=(0,))
    assert np.array_equal(g.apply(g.apply(x)), x)


def test_identity_intensity(rng):
    img = rng.normal(size=(4, 4, 4)).astype(np.float32)
    lab = (img > 0).astype(np.float32)
    pol = AugmentPolicy(flip=False, rotate=False, scale_range=(1.0, 1.0), shift_range=(0.0, 0.0))
    out_img, out_lab = augment(img, lab, pol, rng)
    assert np.array_equal(out_img, img) and np.array_equal(out_lab, lab)


def test_rotation_index_map():
    x = np.zeros((4, 4, 4))
    x[0, 1, 2] = 1
    # a quarter turn in the (0, 1) plane sends (i, j, k) to (n - 1 - j, i, k)
    out = GeometricTransform(k=1, axes=(0, 1)).apply(x)
    assert np.argwhere(out).tolist() == [[2, 0, 2]]


def test_intensity_only_touches_image(rng):
    img = np.ones((4, 4, 4), np.float32)
    lab = np.zeros((4, 4, 4), np.float32)
    lab[1, 2, 3] = 1
    pol = AugmentPolicy(flip=False, rotate=False)
    out_img, out_lab = augment(img, lab, pol, rng)
    assert np.array_equal(out_lab, lab)
    assert not np.array_equal(out_img, img)
    assert 0.8 <= out_img.min() and out_img.max() <= 1.2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 2), max_size=3, unique=True), st.integers(0, 3), st.sampled_from([(0, 1), (0, 2), (1, 2)]),
       st.integers(0, 2**31))
def test_geometric_inverse_and_label_multiset(flips, k, axes, seed):
    g = np.random.default_rng(seed)
    img = g.normal(size=(4, 4, 4))
    lab = g.integers(0, 3, size=(4, 4, 4)).astype(np.float32)
    tr = GeometricTransform(tuple(flips), k, axes)
    assert np.array_equal(tr.invert(tr.apply(img)), img)
    assert np.array_equal(tr.invert(tr.apply(lab)), lab)
    assert np.array_equal(np.bincount(tr.apply(lab).astype(int).ravel(), minlength=3),
                          np.bincount(lab.astype(int).ravel(), minlength=3))


def test_augment_same_geometry_for_image_and_label(rng):
    img = rng.normal(size=(6, 6, 6)).astype(np.float32)
    lab = (img > 0.5).astype(np.float32)
    pol = AugmentPolicy(scale=False, shift=False, flip_prob=1.0, rotate_prob=1.0)
    for _ in range(10):
        out_img, out_lab = augment(img, lab, pol, rng)
        assert np.array_equal(out_lab, (out_img > 0.5).astype(np.float32))
