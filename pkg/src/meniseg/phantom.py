"""Synthetic knee phantoms: two C-shaped wedge bodies in a noisy tissue background.

The real OAI scans are access-restricted, so desk-scale experiments run on
these phantoms instead. Geometry mimics the menisci coarsely: per knee, two
semi-lunar bodies side by side along the left-right axis, each an annular arc
in the transverse plane whose height along superior-inferior tapers from the
outer rim to the inner edge. Intensities are kept inside the [0, 0.005]
windowing range used for the real data so the preprocessing constants stay
meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .volume import AXIS_AP, AXIS_LR, AXIS_SI, BinaryMask, DEFAULT_AXES, Volume

BACKGROUND_LEVEL = 8e-4
FOREGROUND_LEVEL = 4e-3

DEFAULT_SHAPE = (48, 48, 32)
DEFAULT_SPACING = (0.5, 0.5, 0.5)
MIN_SHAPE = (32, 32, 16)


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one two-body phantom; rasterization is analytic and pure."""

    outer_radius_mm: float = 3.2
    inner_radius_mm: float = 1.6
    opening_angle_deg: float = 60.0
    peak_height_mm: float = 2.4
    min_height_frac: float = 0.3
    pose_offset_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_level: float = 2e-4
    distractor_level: float = 3e-3
    seed: int = 0

    def validate(self):
        if not 0 < self.inner_radius_mm < self.outer_radius_mm:
            raise ValueError(
                f"need 0 < inner < outer radius, got "
                f"{self.inner_radius_mm} / {self.outer_radius_mm}"
            )
        if not 0 < self.opening_angle_deg < 360:
            raise ValueError(f"opening angle must be in (0, 360), got {self.opening_angle_deg}")
        if self.peak_height_mm <= 0:
            raise ValueError(f"peak height must be > 0, got {self.peak_height_mm}")
        if not 0 < self.min_height_frac <= 1:
            raise ValueError(f"min_height_frac must be in (0, 1], got {self.min_height_frac}")
        if self.noise_level < 0 or self.distractor_level < 0:
            raise ValueError("noise and distractor levels must be >= 0")
        if len(self.pose_offset_mm) != 3:
            raise ValueError("pose_offset_mm must have 3 components")


def _body_centers(spec, extent_mm, axes):
    """Centers of the two bodies in mm, side by side along left-right."""
    ap, si, lr = (axes.index(a) for a in (AXIS_AP, AXIS_SI, AXIS_LR))
    center = np.array(extent_mm) / 2.0 + np.asarray(spec.pose_offset_mm, dtype=float)
    gap = max(1.0, 0.2 * spec.outer_radius_mm)
    half_sep = spec.outer_radius_mm + gap / 2.0
    c0 = center.copy()
    c1 = center.copy()
    c0[lr] -= half_sep
    c1[lr] += half_sep
    return (c0, c1), (ap, si, lr), gap


def _check_resolution_and_fit(spec, shape, spacing, centers, axis_order, gap):
    ap, si, lr = axis_order
    extent = [shape[i] * spacing[i] for i in range(3)]
    ring_width = spec.outer_radius_mm - spec.inner_radius_mm
    if ring_width < 2.0 * max(spacing[ap], spacing[lr]):
        raise ValueError(
            f"ring width {ring_width:.3f} mm is under 2 in-plane voxels; "
            "the rasterized body may fragment"
        )
    if spec.peak_height_mm * spec.min_height_frac < spacing[si]:
        raise ValueError("wedge height at the inner edge is below one SI voxel")
    if gap < 2.0 * spacing[lr]:
        raise ValueError("bodies are closer than 2 voxels along left-right")
    for c in centers:
        for axis in (ap, lr):
            if c[axis] - spec.outer_radius_mm < 0 or c[axis] + spec.outer_radius_mm > extent[axis]:
                raise ValueError("phantom body does not fit inside the volume")
        half_h = spec.peak_height_mm / 2.0
        if c[si] - half_h < 0 or c[si] + half_h > extent[si]:
            raise ValueError("phantom body does not fit inside the volume (SI extent)")


def rasterize_mask(spec: PhantomSpec, shape, spacing, axes=DEFAULT_AXES) -> np.ndarray:
    """Analytic {0,1} rasterization of the two wedge bodies on the voxel grid."""
    spec.validate()
    shape = tuple(int(n) for n in shape)
    if any(s < m for s, m in zip(shape, MIN_SHAPE)):
        raise ValueError(f"shape {shape} is below the minimum {MIN_SHAPE}")
    extent = [shape[i] * spacing[i] for i in range(3)]
    centers, axis_order, gap = _body_centers(spec, extent, list(axes))
    _check_resolution_and_fit(spec, shape, spacing, centers, axis_order, gap)
    ap, si, lr = axis_order

    coords = [
        (np.arange(shape[i], dtype=np.float64) + 0.5) * spacing[i] for i in range(3)
    ]
    grid = np.meshgrid(*coords, indexing="ij")
    mask = np.zeros(shape, dtype=bool)
    half_open = np.deg2rad(spec.opening_angle_deg) / 2.0
    for k, c in enumerate(centers):
        d_ap = grid[ap] - c[ap]
        d_lr = grid[lr] - c[lr]
        r = np.hypot(d_ap, d_lr)
        # openings face each other: body 0 toward +LR, body 1 toward -LR
        opening_dir = 1.0 if k == 0 else -1.0
        theta = np.arctan2(d_ap, opening_dir * d_lr)
        in_ring = (r >= spec.inner_radius_mm) & (r <= spec.outer_radius_mm)
        in_arc = np.abs(theta) >= half_open
        t = np.clip(
            (r - spec.inner_radius_mm) / (spec.outer_radius_mm - spec.inner_radius_mm),
            0.0,
            1.0,
        )
        height = spec.peak_height_mm * (spec.min_height_frac + (1 - spec.min_height_frac) * t)
        in_wedge = np.abs(grid[si] - c[si]) <= height / 2.0
        mask |= in_ring & in_arc & in_wedge
    return mask.astype(np.uint8)


def generate_phantom(
    spec: PhantomSpec,
    shape=DEFAULT_SHAPE,
    spacing=DEFAULT_SPACING,
    axes=DEFAULT_AXES,
) -> tuple[Volume, BinaryMask]:
    """Build (volume, mask) for a spec. Identical inputs give identical bytes."""
    mask_data = rasterize_mask(spec, shape, spacing, axes)
    rng = np.random.default_rng(spec.seed)
    intensity = np.full(mask_data.shape, BACKGROUND_LEVEL, dtype=np.float64)

    if spec.distractor_level > 0:
        # Two tissue-like slabs (bone/cartilage stand-ins) outside the mask,
        # one per in-plane axis, positioned by the seeded rng.
        si = list(axes).index(AXIS_SI)
        for axis in (a for a in range(3) if a != si):
            n = mask_data.shape[axis]
            width = max(2, n // 10)
            start = int(rng.integers(0, n - width))
            sel = [slice(None)] * 3
            sel[axis] = slice(start, start + width)
            band = np.zeros(mask_data.shape, dtype=bool)
            band[tuple(sel)] = True
            intensity[band & (mask_data == 0)] = spec.distractor_level

    intensity[mask_data == 1] = FOREGROUND_LEVEL
    if spec.noise_level > 0:
        intensity += rng.normal(0.0, spec.noise_level, size=mask_data.shape)

    volume = Volume(intensity.astype(np.float32), spacing, axes)
    mask = BinaryMask(mask_data, spacing, axes)
    return volume, mask


def sample_spec(rng: np.random.Generator, base: PhantomSpec | None = None, seed: int = 0) -> PhantomSpec:
    """Jitter a base spec for dataset variety. Jitter ranges are chosen so any
    draw stays inside the valid envelope of the default shape/spacing (the
    left-right extent is the tight one: two bodies must fit side by side)."""
    base = base or PhantomSpec()
    scale = rng.uniform(0.9, 1.05)
    return replace(
        base,
        outer_radius_mm=base.outer_radius_mm * scale,
        inner_radius_mm=base.inner_radius_mm * scale * rng.uniform(0.85, 1.05),
        opening_angle_deg=float(rng.uniform(40.0, 90.0)),
        peak_height_mm=base.peak_height_mm * rng.uniform(0.85, 1.15),
        pose_offset_mm=(
            float(rng.uniform(-1.0, 1.0)),  # anterior-posterior
            float(rng.uniform(-1.0, 1.0)),  # superior-inferior
            float(rng.uniform(-0.5, 0.5)),  # left-right
        ),
        seed=seed,
    )
