"""3D volume/mask data model, on-disk persistence, and dataset splitting.

Arrays are indexed (X, Y, Z) with a physical spacing in mm per axis and an
anatomical label per axis. Nothing here assumes a particular orientation; the
labels are caller-supplied metadata with a documented default that matches the
OAI DESS acquisition (sagittal in-plane, slices stacked left-right).
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

AXIS_AP = "anterior-posterior"
AXIS_SI = "superior-inferior"
AXIS_LR = "left-right"

# Default interpretation of (X, Y, Z): sagittal plane in-plane, slice stack
# along Z. Which in-plane axis is superior-inferior is metadata the scanner
# header would provide; callers can override.
DEFAULT_AXES = (AXIS_AP, AXIS_SI, AXIS_LR)
VALID_AXIS_LABELS = frozenset(DEFAULT_AXES)

# OAI DESS reference geometry: 384 x 384 sagittal plane, 160 slices at
# 0.365 mm x 0.456 mm in-plane and 0.7 mm slice thickness.
OAI_SHAPE = (384, 384, 160)
OAI_SPACING_MM = (0.365, 0.456, 0.7)

MVOL_SUFFIX = ".mvol"
_HEADER_NAME = "header.json"
_DATA_NAME = "data.raw"


class VolumeIOError(ValueError):
    """Raised when an on-disk container is missing, malformed, or inconsistent."""


def _validate_geometry(data, spacing, axes):
    if data.ndim != 3:
        raise ValueError(f"expected a 3D array, got ndim={data.ndim}")
    if any(n < 1 for n in data.shape):
        raise ValueError(f"all shape components must be >= 1, got {data.shape}")
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive reals, got {spacing}")
    if len(axes) != 3 or set(axes) != VALID_AXIS_LABELS:
        raise ValueError(
            f"axes must be a permutation of {sorted(VALID_AXIS_LABELS)}, got {axes}"
        )


@dataclass(frozen=True)
class Volume:
    """3D scalar image (float32) with per-axis mm spacing and anatomical labels.

    Treated as immutable after construction; safe to share across readers.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    axes: tuple[str, str, str] = DEFAULT_AXES

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        spacing = tuple(float(s) for s in self.spacing)
        axes = tuple(self.axes)
        _validate_geometry(data, spacing, axes)
        if not np.isfinite(data).all():
            raise ValueError("volume data contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "axes", axes)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def axis_index(self, label: str) -> int:
        return self.axes.index(label)

    @property
    def si_axis(self) -> int:
        return self.axis_index(AXIS_SI)

    @property
    def sagittal_axis(self) -> int:
        """Axis along which sagittal slices are stacked (the left-right normal)."""
        return self.axis_index(AXIS_LR)


@dataclass(frozen=True)
class BinaryMask:
    """3D {0,1} label volume (uint8) sharing the Volume geometry model."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    axes: tuple[str, str, str] = DEFAULT_AXES

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if data.dtype != np.uint8:
            values = np.unique(data)
            if not np.isin(values, (0, 1)).all():
                raise ValueError(f"mask values must be in {{0, 1}}, found {values[:8]}")
            data = data.astype(np.uint8)
        elif data.size and data.max() > 1:
            raise ValueError("mask values must be in {0, 1}")
        spacing = tuple(float(s) for s in self.spacing)
        axes = tuple(self.axes)
        _validate_geometry(data, spacing, axes)
        object.__setattr__(self, "data", np.ascontiguousarray(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "axes", axes)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def axis_index(self, label: str) -> int:
        return self.axes.index(label)

    @property
    def si_axis(self) -> int:
        return self.axis_index(AXIS_SI)

    @property
    def sagittal_axis(self) -> int:
        return self.axis_index(AXIS_LR)

    def foreground_count(self) -> int:
        return int(self.data.sum())


def same_geometry(a, b) -> bool:
    return a.shape == b.shape and a.spacing == b.spacing and a.axes == b.axes


def require_same_geometry(a, b, what="operands"):
    if not same_geometry(a, b):
        raise ValueError(
            f"{what} have mismatched geometry: "
            f"{a.shape}/{a.spacing} vs {b.shape}/{b.spacing}"
        )


# ---------------------------------------------------------------------------
# Native .mvol container: a directory with header.json + data.raw (C order,
# last axis fastest, little endian). Hand-writable and bit-exact.
# ---------------------------------------------------------------------------

_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


def _save_mvol(obj, path, dtype_name: str):
    path = Path(path)
    if path.suffix != MVOL_SUFFIX:
        path = path.with_suffix(MVOL_SUFFIX)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": list(obj.shape),
        "spacing_mm": list(obj.spacing),
        "axes": list(obj.axes),
        "dtype": dtype_name,
        "byte_order": "little",
    }
    (path / _HEADER_NAME).write_text(json.dumps(header, indent=2) + "\n")
    payload = np.ascontiguousarray(obj.data).astype(_DTYPES[dtype_name]).tobytes()
    (path / _DATA_NAME).write_bytes(payload)
    return path


def save_volume(volume: Volume, path) -> Path:
    return _save_mvol(volume, path, "float32")


def save_mask(mask: BinaryMask, path) -> Path:
    return _save_mvol(mask, path, "uint8")


def _load_mvol(path):
    path = Path(path)
    header_path = path / _HEADER_NAME
    data_path = path / _DATA_NAME
    if not path.is_dir() or not header_path.is_file():
        raise FileNotFoundError(f"no volume container at {path}")
    if not data_path.is_file():
        raise VolumeIOError(f"{path}: missing {_DATA_NAME}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeIOError(f"{path}: unreadable header ({exc})") from exc
    for key in ("shape", "spacing_mm", "axes", "dtype", "byte_order"):
        if key not in header:
            raise VolumeIOError(f"{path}: header missing field {key!r}")
    if header["byte_order"] != "little":
        raise VolumeIOError(f"{path}: unsupported byte_order {header['byte_order']!r}")
    if header["dtype"] not in _DTYPES:
        raise VolumeIOError(f"{path}: unsupported dtype {header['dtype']!r}")
    shape = tuple(int(n) for n in header["shape"])
    if len(shape) != 3:
        raise VolumeIOError(f"{path}: shape must have 3 components, got {shape}")
    dtype = _DTYPES[header["dtype"]]
    payload = data_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeIOError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    spacing = tuple(float(s) for s in header["spacing_mm"])
    axes = tuple(header["axes"])
    return data, spacing, axes, header["dtype"]


def load_volume(path) -> Volume:
    data, spacing, axes, _ = _load_mvol(path)
    return Volume(data.astype(np.float32), spacing, axes)


def load_mask(path) -> BinaryMask:
    data, spacing, axes, dtype_name = _load_mvol(path)
    if dtype_name != "uint8":
        raise VolumeIOError(f"{path}: mask container must be uint8, got {dtype_name}")
    values = np.unique(data)
    if not np.isin(values, (0, 1)).all():
        raise VolumeIOError(f"{path}: mask payload has values outside {{0, 1}}")
    return BinaryMask(data, spacing, axes)


# ---------------------------------------------------------------------------
# Optional NIfTI-1 ingestion (plain or gzip), mapped onto the same types.
# Only the fields needed to recover geometry and voxel data are parsed.
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
    256: np.dtype("i1"),
    512: np.dtype("u2"),
    768: np.dtype("u4"),
}


def load_nifti(path, axes: tuple[str, str, str] = DEFAULT_AXES) -> Volume:
    """Read a (possibly gzipped) single-file NIfTI-1 image as a Volume.

    Axis labels cannot be inferred reliably from NIfTI orientation fields for
    this purpose, so they are taken from ``axes``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 352:
        raise VolumeIOError(f"{path}: too short to be a NIfTI-1 file")
    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != 348:
            raise VolumeIOError(f"{path}: bad NIfTI-1 header size {sizeof_hdr}")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeIOError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    (datatype,) = struct.unpack_from(endian + "h", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", raw, 112)
    ndim = dim[0]
    if ndim < 3 or any(d != 1 for d in dim[4 : 1 + ndim]):
        raise VolumeIOError(f"{path}: expected a 3D image, dim={dim}")
    shape = tuple(int(d) for d in dim[1:4])
    if datatype not in _NIFTI_DTYPES:
        raise VolumeIOError(f"{path}: unsupported NIfTI datatype {datatype}")
    dtype = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    offset = int(vox_offset)
    count = int(np.prod(shape))
    expected = count * dtype.itemsize
    if len(raw) < offset + expected:
        raise VolumeIOError(
            f"{path}: payload has {len(raw) - offset} bytes, header implies {expected}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    # NIfTI stores Fortran order (first index fastest).
    data = flat.reshape(shape, order="F").astype(np.float32)
    if scl_slope not in (0.0,) and (scl_slope != 1.0 or scl_inter != 0.0):
        data = data * np.float32(scl_slope) + np.float32(scl_inter)
    spacing = tuple(float(abs(p)) for p in pixdim[1:4])
    return Volume(data, spacing, axes)


def load_nifti_mask(path, axes: tuple[str, str, str] = DEFAULT_AXES) -> BinaryMask:
    volume = load_nifti(path, axes)
    values = np.unique(volume.data)
    if not np.isin(values, (0.0, 1.0)).all():
        raise VolumeIOError(f"{path}: mask payload has values outside {{0, 1}}")
    return BinaryMask(volume.data.astype(np.uint8), volume.spacing, volume.axes)


# ---------------------------------------------------------------------------
# Dataset splitting. Patient-level: every volume of a patient follows the
# patient's split, so longitudinal time points never straddle a boundary.
# ---------------------------------------------------------------------------

SPLIT_PARTS = ("train", "validation", "test")


@dataclass(frozen=True)
class DatasetSplit:
    assignment: dict[str, str]
    counts: tuple[int, int, int]

    def patients(self, part: str) -> list[str]:
        if part not in SPLIT_PARTS:
            raise ValueError(f"unknown split part {part!r}")
        return sorted(p for p, s in self.assignment.items() if s == part)


def split_dataset(patient_ids, counts, seed: int) -> DatasetSplit:
    """Deterministically partition patients into train/validation/test.

    The permutation is seeded and applied to the sorted id list, so the result
    does not depend on input ordering.
    """
    ids = sorted(str(p) for p in patient_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids contain duplicates")
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise ValueError(f"counts must be 3 non-negative ints, got {counts}")
    if sum(counts) != len(ids):
        raise ValueError(
            f"counts {counts} sum to {sum(counts)} but there are {len(ids)} patients"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    assignment = {}
    start = 0
    for part, n in zip(SPLIT_PARTS, counts):
        for pid in shuffled[start : start + n]:
            assignment[pid] = part
        start += n
    return DatasetSplit(assignment=assignment, counts=counts)


def assign_volumes(split: DatasetSplit, volume_patients: dict[str, str]) -> dict[str, str]:
    """Map volume ids to split parts via their owning patient."""
    out = {}
    for vol_id, patient in volume_patients.items():
        if patient not in split.assignment:
            raise ValueError(f"volume {vol_id!r} references unknown patient {patient!r}")
        out[vol_id] = split.assignment[patient]
    return out
