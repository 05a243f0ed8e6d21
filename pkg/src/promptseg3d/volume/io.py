"""Volume file IO.

``raw_v1`` layout (little-endian)::

    offset  size  field
    0       5     magic b"TDSV1"
    5       12    dims D, H, W        (3 x uint32)
    17      12    spacing in mm       (3 x float32)
    29      1     kind                (uint8, 0 = intensity, 1 = label)
    30      2     num_classes         (uint16, 0 for intensity volumes)
    32      4*DHW payload             (float32, D outermost / W innermost)

NIfTI is read-only and needs ``nibabel``; check :data:`NIFTI_AVAILABLE`.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import FormatError, FormatUnavailableError, ValidationError
from .core import Volume3D, VolumeKind

RAW_MAGIC = b"TDSV1"
_HEADER = struct.Struct("<5s3I3fBH")

try:  # optional capability
    import nibabel as _nib

    NIFTI_AVAILABLE = True
except ImportError:  # pragma: no cover - depends on environment
    _nib = None
    NIFTI_AVAILABLE = False


def encode_raw(vol: Volume3D) -> bytes:
    header = _HEADER.pack(
        RAW_MAGIC, *vol.shape, *vol.spacing, int(vol.kind), int(vol.num_classes)
    )
    return header + np.ascontiguousarray(vol.data, dtype="<f4").tobytes()


def decode_raw(buf: bytes) -> Volume3D:
    if len(buf) < _HEADER.size:
        raise FormatError(f"raw_v1 header truncated ({len(buf)} bytes)")
    magic, d, h, w, sd, sh, sw, kind, ncls = _HEADER.unpack_from(buf)
    if magic != RAW_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {RAW_MAGIC!r}")
    if min(d, h, w) <= 0:
        raise ValidationError(f"dims must be positive, got {(d, h, w)}")
    if not all(s > 0 for s in (sd, sh, sw)):
        raise ValidationError(f"spacing must be positive, got {(sd, sh, sw)}")
    if kind not in (0, 1):
        raise FormatError(f"unknown volume kind {kind}")
    expected = 4 * d * h * w
    payload = buf[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)
    return Volume3D(data, (sd, sh, sw), VolumeKind(kind), ncls)


def save_volume(vol: Volume3D, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_raw(vol))


def load_volume(path, format: str = "raw_v1", kind=VolumeKind.INTENSITY, num_classes: int = 0) -> Volume3D:
    """Load a volume. ``kind``/``num_classes`` only apply to NIfTI, since
    raw_v1 files carry them in the header."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if format == "raw_v1":
        with open(path, "rb") as f:
            return decode_raw(f.read())
    if format == "nifti":
        return _load_nifti(path, VolumeKind(kind), num_classes)
    raise FormatError(f"unknown volume format {format!r}")


def _load_nifti(path, kind: VolumeKind, num_classes: int) -> Volume3D:
    if not NIFTI_AVAILABLE:
        raise FormatUnavailableError("nifti format unavailable: install the 'nifti' extra (nibabel)")
    try:
        img = _nib.load(str(path))
        arr = np.asarray(img.dataobj, dtype=np.float32)
        zooms = img.header.get_zooms()[:3]
    except Exception as exc:  # nibabel raises a zoo of types
        raise FormatError(f"cannot parse NIfTI file {path}: {exc}") from exc
    if arr.ndim != 3:
        raise FormatError(f"expected a 3D NIfTI image, got shape {arr.shape}")
    # NIfTI arrays are (x, y, z); store z-major
    data = np.ascontiguousarray(arr.transpose(2, 1, 0))
    spacing = tuple(float(z) for z in zooms[::-1])
    if kind == VolumeKind.LABEL and num_classes <= 0:
        num_classes = int(data.max()) + 1
    return Volume3D(data, spacing, kind, num_classes)
