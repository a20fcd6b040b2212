"""Intensity windowing, mask-driven cropping, sagittal slicing, and the 2D
backbone input pipeline with its exact inverse.

Everything here is a pure function; all state travels in the returned values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .volume import AXIS_LR, BinaryMask, Volume

WINDOW_LO = 0.0
WINDOW_HI = 0.005
CROP_MARGIN_VOXELS = 20
BACKBONE_INPUT_SIZE = 1024


def window_rescale(volume: Volume, lo: float = WINDOW_LO, hi: float = WINDOW_HI) -> Volume:
    """Clip intensities to [lo, hi] and rescale the window to [0, 1]."""
    if lo >= hi:
        raise ValueError(f"window requires lo < hi, got ({lo}, {hi})")
    data = (np.clip(volume.data, lo, hi) - lo) / (hi - lo)
    return Volume(data.astype(np.float32), volume.spacing, volume.axes)


@dataclass(frozen=True)
class CropBox:
    """Half-open voxel index box: start inclusive, stop exclusive, per axis."""

    start: tuple[int, int, int]
    stop: tuple[int, int, int]

    def __post_init__(self):
        if len(self.start) != 3 or len(self.stop) != 3:
            raise ValueError("crop box needs 3 start and 3 stop indices")
        for lo, hi in zip(self.start, self.stop):
            if lo < 0 or lo >= hi:
                raise ValueError(f"require 0 <= start < stop, got [{lo}, {hi})")
        object.__setattr__(self, "start", tuple(int(v) for v in self.start))
        object.__setattr__(self, "stop", tuple(int(v) for v in self.stop))

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(hi - lo for lo, hi in zip(self.start, self.stop))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(lo, hi) for lo, hi in zip(self.start, self.stop))

    def to_dict(self) -> dict:
        return {"start": list(self.start), "stop": list(self.stop)}

    @classmethod
    def from_dict(cls, d: dict) -> "CropBox":
        return cls(tuple(d["start"]), tuple(d["stop"]))


def compute_crop_box(masks: list[BinaryMask], margin_voxels: int = CROP_MARGIN_VOXELS) -> CropBox:
    """Bounding box of the union of mask foregrounds, expanded by a safety
    margin per direction and clamped to the volume bounds.

    Computed from train/validation masks only; test volumes must be cropped
    with this same box rather than their own masks.
    """
    if not masks:
        raise ValueError("need at least one mask to compute a crop box")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise ValueError(f"masks have mixed shapes: {m.shape} vs {shape}")
    if margin_voxels < 0:
        raise ValueError("margin must be >= 0")
    union = np.zeros(shape, dtype=bool)
    for m in masks:
        union |= m.data.astype(bool)
    if not union.any():
        raise ValueError("all masks are background; crop box undefined")
    start, stop = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        profile = union.any(axis=other)
        idx = np.flatnonzero(profile)
        start.append(max(0, int(idx[0]) - margin_voxels))
        stop.append(min(shape[axis], int(idx[-1]) + 1 + margin_voxels))
    return CropBox(tuple(start), tuple(stop))


def crop(obj, box: CropBox):
    """Crop a Volume or BinaryMask to a box; spacing and labels unchanged."""
    for lo, hi, n in zip(box.start, box.stop, obj.shape):
        if hi > n:
            raise ValueError(f"crop box [{lo}, {hi}) exceeds axis extent {n}")
    data = obj.data[box.slices()].copy()
    return type(obj)(data, obj.spacing, obj.axes)


# ---------------------------------------------------------------------------
# Slice extraction / stacking along the sagittal (left-right) axis.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Slice2D:
    """One 2D slice with its in-plane spacing and position in the stack."""

    data: np.ndarray
    spacing: tuple[float, float]
    index: int


def _resolve_axis(obj, axis) -> int:
    if axis is None:
        return obj.axis_index(AXIS_LR)
    if isinstance(axis, str):
        return obj.axis_index(axis)
    axis = int(axis)
    if not 0 <= axis < 3:
        raise ValueError(f"axis must be in 0..2, got {axis}")
    return axis


def extract_slices(obj, axis=None) -> list[Slice2D]:
    """Split a Volume or BinaryMask into ordered 2D slices along an axis
    (default: the left-right / sagittal-normal axis). Lossless."""
    ax = _resolve_axis(obj, axis)
    in_plane = tuple(s for i, s in enumerate(obj.spacing) if i != ax)
    return [
        Slice2D(np.take(obj.data, i, axis=ax).copy(), in_plane, i)
        for i in range(obj.shape[ax])
    ]


def stack_slices(masks_2d, like, axis=None) -> BinaryMask:
    """Reassemble ordered 2D {0,1} slices into a BinaryMask with the geometry
    of ``like``; slice i lands at index i along the slicing axis."""
    ax = _resolve_axis(like, axis)
    arrays = [m.data if isinstance(m, Slice2D) else np.asarray(m) for m in masks_2d]
    if len(arrays) != like.shape[ax]:
        raise ValueError(
            f"got {len(arrays)} slices for axis extent {like.shape[ax]}"
        )
    plane_shape = tuple(s for i, s in enumerate(like.shape) if i != ax)
    for i, a in enumerate(arrays):
        if a.shape != plane_shape:
            raise ValueError(f"slice {i} has shape {a.shape}, expected {plane_shape}")
    stacked = np.stack(arrays, axis=ax)
    return BinaryMask(stacked.astype(np.uint8), like.spacing, like.axes)


# ---------------------------------------------------------------------------
# 2D backbone input preparation and its inverse.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Image2D:
    """Backbone-ready image: square, 3-channel, with the resize/pad record
    needed to invert the preparation exactly."""

    data: np.ndarray  # (size, size, 3) float32
    scale: float
    padding: tuple[int, int]  # rows, cols appended at the high-index end
    original_shape: tuple[int, int]
    index: int = 0

    def __post_init__(self):
        h, w, c = self.data.shape
        if h != w or c != 3:
            raise ValueError(f"backbone image must be square x3 channels, got {self.data.shape}")
        if any(p < 0 for p in self.padding):
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def scaled_shape(self) -> tuple[int, int]:
        return (self.size - self.padding[0], self.size - self.padding[1])


def _resize_bilinear(img: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resample with half-pixel-center alignment and edge clamping."""
    in_h, in_w = img.shape
    out_h, out_w = out_shape
    rows = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    cols = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return map_coordinates(
        img.astype(np.float64), [rr, cc], order=1, mode="nearest"
    ).astype(np.float32)


def prepare_backbone_input(slice_2d: Slice2D, target: int = BACKBONE_INPUT_SIZE) -> Image2D:
    """Scale the longer side to ``target`` (bilinear, aspect preserved),
    zero-pad the shorter side at the high-index end, replicate to 3 channels."""
    h, w = slice_2d.data.shape
    if h < 1 or w < 1:
        raise ValueError(f"degenerate slice shape {(h, w)}")
    scale = target / max(h, w)
    scaled_h = target if h >= w else max(1, round(h * scale))
    scaled_w = target if w >= h else max(1, round(w * scale))
    resized = _resize_bilinear(slice_2d.data, (scaled_h, scaled_w))
    out = np.zeros((target, target, 3), dtype=np.float32)
    out[:scaled_h, :scaled_w, :] = resized[..., None]
    return Image2D(
        data=out,
        scale=scale,
        padding=(target - scaled_h, target - scaled_w),
        original_shape=(h, w),
        index=slice_2d.index,
    )


def restore_slice_mask(mask_2d: np.ndarray, meta: Image2D) -> np.ndarray:
    """Invert prepare_backbone_input for a mask on the backbone grid: strip
    padding, bilinear downsample to the original slice shape, threshold 0.5."""
    mask_2d = np.asarray(mask_2d, dtype=np.float32)
    if mask_2d.shape != (meta.size, meta.size):
        raise ValueError(
            f"mask shape {mask_2d.shape} does not match backbone size {meta.size}"
        )
    sh, sw = meta.scaled_shape
    unpadded = mask_2d[:sh, :sw]
    restored = _resize_bilinear(unpadded, meta.original_shape)
    return (restored >= 0.5).astype(np.uint8)
