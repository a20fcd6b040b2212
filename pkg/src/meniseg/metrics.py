"""Segmentation metrics and test-set aggregation.

Covers volume overlap (Dice), surface distance (95th-percentile Hausdorff in
mm under anisotropic spacing), average transverse thickness, connected-component
statistics, Bland-Altman agreement, and transverse projections. All functions
are pure; aggregation is order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, require_same_geometry

# Test-set results of the full-scale OAI experiments (GPU training on the
# restricted IWOAI-2019 subset), kept for comparison. Desk-scale phantom runs
# are not expected to reproduce these.
OAI_REFERENCE_RESULTS = {
    "vit_decoder_only": {"dice": (0.81, 0.03), "hd95_mm": (3.1, 1.9), "thickness_diff_mm": (-0.17, 0.2)},
    "vit_end_to_end": {"dice": (0.87, 0.03), "hd95_mm": (2.4, 1.4), "thickness_diff_mm": (0.07, 0.12)},
    "unet3d": {"dice": (0.87, 0.03), "hd95_mm": (1.8, 0.8), "thickness_diff_mm": (0.03, 0.15)},
}
OAI_REFERENCE_COMPONENT_MEANS = {
    "vit_decoder_only": 46.9,
    "vit_end_to_end": 10.2,
    "unet3d": 2.3,
    "ground_truth": 2.1,
}


def dice_score(gt: BinaryMask, sp: BinaryMask) -> float:
    """Overlap score 2|GT n SP| / (|GT| + |SP|), exact integer arithmetic.

    Convention: both masks empty -> 1.0; exactly one empty -> 0.0.
    """
    require_same_geometry(gt, sp, "dice operands")
    a = gt.data.astype(bool)
    b = sp.data.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / total


def _six_connectivity():
    return ndimage.generate_binary_structure(3, 1)


def surface_voxels(mask_data: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbor that is background or
    out of bounds (the image boundary counts as background)."""
    fg = mask_data.astype(bool)
    eroded = ndimage.binary_erosion(fg, structure=_six_connectivity(), border_value=0)
    return fg & ~eroded


def hausdorff95(gt: BinaryMask, sp: BinaryMask, spacing=None, method: str = "pooled") -> float:
    """95th-percentile Hausdorff distance in mm between mask surfaces.

    Directed surface distances are measured both ways between voxel centers
    under the (anisotropic) spacing. ``pooled`` takes the 95th percentile
    (linear interpolation) of the combined bidirectional distance multiset;
    ``directed_max`` takes the max of the two directed 95th percentiles.
    """
    require_same_geometry(gt, sp, "hausdorff operands")
    if method not in ("pooled", "directed_max"):
        raise ValueError(f"unknown method {method!r}")
    spacing = gt.spacing if spacing is None else tuple(float(s) for s in spacing)
    if not gt.data.any() or not sp.data.any():
        raise ValueError("hausdorff95 is undefined when either mask is empty")
    surf_gt = surface_voxels(gt.data)
    surf_sp = surface_voxels(sp.data)
    dt_to_gt = ndimage.distance_transform_edt(~surf_gt, sampling=spacing)
    dt_to_sp = ndimage.distance_transform_edt(~surf_sp, sampling=spacing)
    d_sp = dt_to_gt[surf_sp]  # prediction surface -> nearest GT surface
    d_gt = dt_to_sp[surf_gt]  # GT surface -> nearest prediction surface
    if method == "pooled":
        return float(np.percentile(np.concatenate([d_gt, d_sp]), 95))
    return float(max(np.percentile(d_gt, 95), np.percentile(d_sp, 95)))


def avg_transverse_thickness(mask: BinaryMask, spacing=None, si_axis=None) -> float:
    """Mean foreground extent along superior-inferior over occupied transverse
    columns: (voxel count / non-zero column count) x SI spacing, in mm."""
    if si_axis is None:
        si_axis = mask.si_axis
    spacing = mask.spacing if spacing is None else tuple(float(s) for s in spacing)
    fg = mask.data.astype(bool)
    total = int(fg.sum())
    if total == 0:
        raise ValueError("thickness is undefined for an empty mask")
    columns = fg.any(axis=si_axis)
    return total / int(columns.sum()) * spacing[si_axis]


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(mask: BinaryMask, connectivity: int = 26) -> tuple[int, np.ndarray]:
    """Label foreground components. Labels 1..count partition the foreground
    and are numbered by first appearance in C-order scan."""
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be one of {sorted(_STRUCTURES)}")
    labels, count = ndimage.label(mask.data, structure=_STRUCTURES[connectivity])
    if count > 1:
        flat = labels.ravel()
        nz = np.flatnonzero(flat)
        first_seen = np.full(count + 1, flat.size, dtype=np.int64)
        np.minimum.at(first_seen, flat[nz], nz)
        order = np.argsort(first_seen[1:], kind="stable")
        remap = np.zeros(count + 1, dtype=labels.dtype)
        remap[order + 1] = np.arange(1, count + 1)
        labels = remap[labels]
    return int(count), labels


@dataclass(frozen=True)
class BlandAltmanStats:
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    points: tuple[tuple[float, float], ...]  # (mean of pair, pred - gt)


def bland_altman(pairs) -> BlandAltmanStats:
    """Agreement stats for (predicted, ground-truth) value pairs in mm.

    Differences are prediction minus ground truth; limits of agreement are
    mean +/- 1.96 x sample sd (n-1 denominator).
    """
    pairs = [(float(p), float(g)) for p, g in pairs]
    if len(pairs) < 2:
        raise ValueError("Bland-Altman needs at least 2 pairs")
    diffs = np.array([p - g for p, g in pairs])
    means = np.array([(p + g) / 2.0 for p, g in pairs])
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return BlandAltmanStats(
        mean_diff=mean,
        sd_diff=sd,
        loa_low=mean - 1.96 * sd,
        loa_high=mean + 1.96 * sd,
        points=tuple(zip(means.tolist(), diffs.tolist())),
    )


def transverse_projection(mask: BinaryMask, si_axis=None) -> np.ndarray:
    """Sum the mask through the superior-inferior axis: a top-down 2D image
    whose pixel value is the column's foreground count."""
    if si_axis is None:
        si_axis = mask.si_axis
    return mask.data.astype(np.int64).sum(axis=si_axis)


# ---------------------------------------------------------------------------
# Test-set evaluation.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice: float
    hd95_mm: float  # NaN when undefined (an empty mask on either side)
    thickness_pred_mm: float  # NaN when the prediction is empty
    thickness_gt_mm: float
    thickness_diff_mm: float
    components_pred: int
    components_gt: int


CASE_CSV_COLUMNS = (
    "case_id",
    "dice",
    "hd95_mm",
    "thickness_pred_mm",
    "thickness_gt_mm",
    "thickness_diff_mm",
    "components_pred",
    "components_gt",
)


@dataclass(frozen=True)
class MetricsReport:
    cases: tuple[CaseMetrics, ...]
    aggregates: dict[str, dict[str, float]]  # metric -> {"mean", "sd", "n"}
    bland_altman_stats: BlandAltmanStats | None


def _aggregate(values) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        return {"mean": math.nan, "sd": math.nan, "n": 0}
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "sd": sd, "n": int(arr.size)}


AGGREGATE_METRICS = (
    "dice",
    "hd95_mm",
    "thickness_pred_mm",
    "thickness_gt_mm",
    "thickness_diff_mm",
    "components_pred",
    "components_gt",
)


def aggregate_cases(cases) -> dict[str, dict[str, float]]:
    return {
        name: _aggregate([getattr(c, name) for c in cases]) for name in AGGREGATE_METRICS
    }


def evaluate_case(
    prediction: BinaryMask,
    ground_truth: BinaryMask,
    case_id: str = "",
    si_axis=None,
    hd95_method: str = "pooled",
    connectivity: int = 26,
) -> CaseMetrics:
    require_same_geometry(prediction, ground_truth, f"case {case_id!r} masks")
    dice = dice_score(ground_truth, prediction)
    try:
        hd = hausdorff95(ground_truth, prediction, method=hd95_method)
    except ValueError:
        hd = math.nan
    t_gt = avg_transverse_thickness(ground_truth, si_axis=si_axis)
    try:
        t_pred = avg_transverse_thickness(prediction, si_axis=si_axis)
    except ValueError:
        t_pred = math.nan
    n_pred, _ = connected_components(prediction, connectivity)
    n_gt, _ = connected_components(ground_truth, connectivity)
    return CaseMetrics(
        case_id=case_id,
        dice=dice,
        hd95_mm=hd,
        thickness_pred_mm=t_pred,
        thickness_gt_mm=t_gt,
        thickness_diff_mm=t_pred - t_gt,
        components_pred=n_pred,
        components_gt=n_gt,
    )


def evaluate_test_set(
    predictions,
    ground_truths,
    case_ids=None,
    si_axis=None,
    hd95_method: str = "pooled",
    connectivity: int = 26,
) -> MetricsReport:
    """Per-case metrics plus mean +/- sample-sd aggregates and Bland-Altman
    agreement over the thickness pairs."""
    predictions = list(predictions)
    ground_truths = list(ground_truths)
    if len(predictions) != len(ground_truths):
        raise ValueError(
            f"{len(predictions)} predictions vs {len(ground_truths)} ground truths"
        )
    if case_ids is None:
        case_ids = [f"case{i:03d}" for i in range(len(predictions))]
    elif len(case_ids) != len(predictions):
        raise ValueError("case_ids length does not match the case lists")
    cases = tuple(
        evaluate_case(p, g, cid, si_axis, hd95_method, connectivity)
        for p, g, cid in zip(predictions, ground_truths, case_ids)
    )
    thickness_pairs = [
        (c.thickness_pred_mm, c.thickness_gt_mm)
        for c in cases
        if math.isfinite(c.thickness_pred_mm) and math.isfinite(c.thickness_gt_mm)
    ]
    ba = bland_altman(thickness_pairs) if len(thickness_pairs) >= 2 else None
    return MetricsReport(cases=cases, aggregates=aggregate_cases(cases), bland_altman_stats=ba)
