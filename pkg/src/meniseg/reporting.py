"""Metric report serialization (per-case CSV, aggregate JSON) and the figure
set: Dice/HD95 violins, Bland-Altman scatter, and transverse projections."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import (
    CASE_CSV_COLUMNS,
    BlandAltmanStats,
    CaseMetrics,
    MetricsReport,
    aggregate_cases,
    bland_altman,
    transverse_projection,
)


def write_case_csv(report: MetricsReport, path) -> Path:
    """One row per case, fixed column order, full-precision floats."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CASE_CSV_COLUMNS)
        for case in report.cases:
            writer.writerow([getattr(case, col) for col in CASE_CSV_COLUMNS])
    return path


def read_case_csv(path) -> list[CaseMetrics]:
    cases = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cases.append(
                CaseMetrics(
                    case_id=row["case_id"],
                    dice=float(row["dice"]),
                    hd95_mm=float(row["hd95_mm"]),
                    thickness_pred_mm=float(row["thickness_pred_mm"]),
                    thickness_gt_mm=float(row["thickness_gt_mm"]),
                    thickness_diff_mm=float(row["thickness_diff_mm"]),
                    components_pred=int(row["components_pred"]),
                    components_gt=int(row["components_gt"]),
                )
            )
    return cases


def _ba_dict(ba: BlandAltmanStats | None):
    if ba is None:
        return None
    return {
        "mean_diff": ba.mean_diff,
        "sd_diff": ba.sd_diff,
        "loa_low": ba.loa_low,
        "loa_high": ba.loa_high,
    }


def write_aggregate_json(report: MetricsReport, path) -> Path:
    path = Path(path)
    payload = {
        "n_cases": len(report.cases),
        "aggregates": report.aggregates,
        "bland_altman": _ba_dict(report.bland_altman_stats),
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def report_from_cases(cases) -> MetricsReport:
    """Rebuild a full report (aggregates, Bland-Altman) from per-case rows."""
    cases = tuple(cases)
    pairs = [
        (c.thickness_pred_mm, c.thickness_gt_mm)
        for c in cases
        if math.isfinite(c.thickness_pred_mm) and math.isfinite(c.thickness_gt_mm)
    ]
    ba = bland_altman(pairs) if len(pairs) >= 2 else None
    return MetricsReport(cases=cases, aggregates=aggregate_cases(cases), bland_altman_stats=ba)


# ---------------------------------------------------------------------------
# Figures.
# ---------------------------------------------------------------------------


def _save(fig, path_base: Path, formats=("png", "svg")):
    written = []
    for ext in formats:
        out = path_base.with_suffix(f".{ext}")
        fig.savefig(out, bbox_inches="tight")
        written.append(out)
    plt.close(fig)
    return written


def violin_plot(values_by_label: dict[str, list[float]], ylabel: str, path_base, title=None):
    """Violin with an inner box plot per labelled distribution. Labels whose
    values are all undefined (NaN) are annotated rather than plotted."""
    labels = list(values_by_label)
    data = [
        [v for v in values_by_label[lab] if math.isfinite(v)] for lab in labels
    ]
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(labels), 4))
    positions = np.arange(1, len(labels) + 1)
    filled = [(p, d) for p, d in zip(positions, data) if d]
    if filled:
        ax.violinplot([d for _, d in filled], positions=[p for p, _ in filled], showextrema=False)
        ax.boxplot([d for _, d in filled], positions=[p for p, _ in filled], widths=0.12)
    for p, d in zip(positions, data):
        if not d:
            ax.annotate("undefined", (p, 0.5), xycoords=("data", "axes fraction"),
                        ha="center", fontsize=8, rotation=90)
    ax.set_xticks(positions)
    ax.set_xticklabels(labels)
    ax.set_xlim(0.5, len(labels) + 0.5)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    return _save(fig, Path(path_base))


def bland_altman_plot(ba: BlandAltmanStats, path_base, title=None):
    means = [m for m, _ in ba.points]
    diffs = [d for _, d in ba.points]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(means, diffs, s=18)
    ax.axhline(ba.mean_diff, color="k", lw=1, label=f"mean {ba.mean_diff:.3f}")
    for y, name in ((ba.loa_low, "-1.96 sd"), (ba.loa_high, "+1.96 sd")):
        ax.axhline(y, color="k", lw=1, ls="--")
        ax.annotate(name, (0.99, y), xycoords=("axes fraction", "data"), ha="right", fontsize=8)
    ax.set_xlabel("mean thickness of pair (mm)")
    ax.set_ylabel("thickness difference, prediction - truth (mm)")
    if title:
        ax.set_title(title)
    return _save(fig, Path(path_base))


def projection_image(mask, path, si_axis=None) -> Path:
    """Top-down view: brighter pixels mean thicker structure at that column."""
    proj = transverse_projection(mask, si_axis=si_axis)
    path = Path(path)
    vmax = max(1, int(proj.max()))
    plt.imsave(path, proj.T, cmap="gray", vmin=0, vmax=vmax, origin="lower")
    return path
