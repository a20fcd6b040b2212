"""Experiment stages behind the CLI: phantom dataset generation, preprocessing
(window + leakage-safe crop), training, prediction, evaluation, reporting.

Each stage writes a self-contained artifact directory with a manifest, and the
output of each stage is a valid input of the next.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, write_manifest
from .metrics import evaluate_test_set
from .phantom import DEFAULT_SHAPE, DEFAULT_SPACING, PhantomSpec, generate_phantom, sample_spec
from .preprocess import (
    compute_crop_box,
    crop,
    extract_slices,
    prepare_backbone_input,
    window_rescale,
)
from .promptless import (
    FREEZE_POLICIES,
    PromptlessSegmenter,
    build_promptless_segmenter,
    predict_volume,
    set_freeze_policy,
)
from .reporting import (
    bland_altman_plot,
    projection_image,
    read_case_csv,
    report_from_cases,
    violin_plot,
    write_aggregate_json,
    write_case_csv,
)
from .training import TrainConfig, build_model_from_checkpoint, load_checkpoint, train
from .unet3d import UNet3D, UNet3DConfig, predict_mask_volume
from .volume import load_mask, load_volume, save_mask, save_volume, split_dataset

MODEL_KINDS = ("unet3d", "promptless_vit")


def device_from_env(default: str = "cpu") -> str:
    return os.environ.get("MENISEG_DEVICE", default)


def _case_dir(root, case_id) -> Path:
    return Path(root) / "cases" / case_id


def _load_cases_index(data_dir) -> dict:
    path = Path(data_dir) / "cases.json"
    if not path.is_file():
        raise ConfigError(f"no cases.json in {data_dir}; not a dataset directory?")
    return json.loads(path.read_text())


def _load_split(data_dir) -> dict:
    path = Path(data_dir) / "split.json"
    if not path.is_file():
        raise ConfigError(f"no split.json in {data_dir}; run the preprocess stage first")
    return json.loads(path.read_text())


def split_case_ids(data_dir, part: str) -> list[str]:
    split = _load_split(data_dir)
    return sorted(c for c, p in split["volumes"].items() if p == part)


# ---------------------------------------------------------------------------
# phantom-gen
# ---------------------------------------------------------------------------


def run_phantom_gen(
    out_dir,
    count: int,
    seed: int,
    shape=DEFAULT_SHAPE,
    spacing=DEFAULT_SPACING,
    timepoints: int = 1,
    noise_level: float | None = None,
    distractor_level: float | None = None,
) -> Path:
    """Write ``count`` phantom patients (x timepoints volumes) with masks.

    Fully deterministic in (seed, geometry): reruns are byte-identical.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if timepoints < 1:
        raise ConfigError("timepoints must be >= 1")
    out_dir = Path(out_dir)
    base = PhantomSpec()
    if noise_level is not None:
        base = replace(base, noise_level=noise_level)
    if distractor_level is not None:
        base = replace(base, distractor_level=distractor_level)

    children = np.random.SeedSequence(seed).spawn(count)
    cases = []
    for i, child in enumerate(children):
        patient = f"p{i:03d}"
        rng = np.random.default_rng(child)
        for t in range(timepoints):
            case_id = patient if timepoints == 1 else f"{patient}_t{t}"
            spec = sample_spec(rng, base, seed=int(rng.integers(0, 2**31 - 1)))
            volume, mask = generate_phantom(spec, shape, spacing)
            case_dir = _case_dir(out_dir, case_id)
            save_volume(volume, case_dir / "volume.mvol")
            save_mask(mask, case_dir / "mask.mvol")
            cases.append({"case_id": case_id, "patient_id": patient, "spec": asdict(spec)})

    index = {
        "cases": cases,
        "shape": list(shape),
        "spacing_mm": list(spacing),
    }
    (out_dir / "cases.json").write_text(json.dumps(index, indent=2) + "\n")
    write_manifest(
        out_dir,
        "phantom-gen",
        {
            "count": count,
            "seed": seed,
            "shape": list(shape),
            "spacing_mm": list(spacing),
            "timepoints": timepoints,
            "noise_level": base.noise_level,
            "distractor_level": base.distractor_level,
        },
    )
    return out_dir


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------


def run_preprocess(
    data_dir,
    out_dir,
    counts: tuple[int, int, int],
    seed: int,
    window_lo: float = 0.0,
    window_hi: float = 0.005,
    margin_voxels: int = 20,
) -> Path:
    """Split patients, window intensities, and crop every volume/mask with one
    box computed from the train+validation masks only (the test set is cropped
    with the same box, never its own masks)."""
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    index = _load_cases_index(data_dir)
    patients = sorted({c["patient_id"] for c in index["cases"]})
    try:
        split = split_dataset(patients, counts, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    volume_parts = {
        c["case_id"]: split.assignment[c["patient_id"]] for c in index["cases"]
    }

    fit_masks = [
        load_mask(_case_dir(data_dir, cid) / "mask.mvol")
        for cid, part in sorted(volume_parts.items())
        if part in ("train", "validation")
    ]
    box = compute_crop_box(fit_masks, margin_voxels)

    for case in index["cases"]:
        cid = case["case_id"]
        volume = load_volume(_case_dir(data_dir, cid) / "volume.mvol")
        mask = load_mask(_case_dir(data_dir, cid) / "mask.mvol")
        volume = crop(window_rescale(volume, window_lo, window_hi), box)
        mask = crop(mask, box)
        case_dir = _case_dir(out_dir, cid)
        save_volume(volume, case_dir / "volume.mvol")
        save_mask(mask, case_dir / "mask.mvol")

    (out_dir / "cases.json").write_text(json.dumps(index, indent=2) + "\n")
    (out_dir / "split.json").write_text(
        json.dumps(
            {
                "assignment": split.assignment,
                "counts": list(split.counts),
                "volumes": volume_parts,
                "seed": seed,
            },
            indent=2,
        )
        + "\n"
    )
    (out_dir / "cropbox.json").write_text(json.dumps(box.to_dict(), indent=2) + "\n")
    write_manifest(
        out_dir,
        "preprocess",
        {
            "data": str(data_dir),
            "counts": list(counts),
            "seed": seed,
            "window": [window_lo, window_hi],
            "margin_voxels": margin_voxels,
        },
    )
    return out_dir


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_part(data_dir, part):
    ids = split_case_ids(data_dir, part)
    volumes = [load_volume(_case_dir(data_dir, cid) / "volume.mvol") for cid in ids]
    masks = [load_mask(_case_dir(data_dir, cid) / "mask.mvol") for cid in ids]
    return ids, volumes, masks


def build_volume_tensors(volumes, masks):
    x = torch.stack([torch.from_numpy(v.data).float() for v in volumes])[:, None]
    y = torch.stack([torch.from_numpy(m.data.astype("float32")) for m in masks])[:, None]
    return x, y


def build_slice_tensors(volumes, masks, image_size: int):
    """2D training set: every sagittal slice (empty targets included), prepared
    for the backbone; targets live on the backbone grid."""
    xs, ys = [], []
    for volume, mask in zip(volumes, masks):
        for v_slice, m_slice in zip(extract_slices(volume), extract_slices(mask)):
            image = prepare_backbone_input(v_slice, target=image_size)
            target = prepare_backbone_input(m_slice, target=image_size)
            xs.append(torch.from_numpy(image.data).permute(2, 0, 1))
            ys.append((torch.from_numpy(target.data[..., 0]) >= 0.5).float()[None])
    return torch.stack(xs), torch.stack(ys)


def run_train(
    data_dir,
    out_dir,
    model_kind: str,
    train_config: TrainConfig,
    unet_config: UNet3DConfig | None = None,
    vit_preset: str = "toy",
    freeze_policy: str = "end_to_end",
    device: str | None = None,
) -> Path:
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    if model_kind not in MODEL_KINDS:
        raise ConfigError(f"model must be one of {MODEL_KINDS}, got {model_kind!r}")
    if freeze_policy not in FREEZE_POLICIES:
        raise ConfigError(f"freeze policy must be one of {FREEZE_POLICIES}")
    device = device or device_from_env()

    _, train_volumes, train_masks = _load_part(data_dir, "train")
    _, val_volumes, val_masks = _load_part(data_dir, "validation")
    if not train_volumes or not val_volumes:
        raise ConfigError("train and validation splits must both be non-empty")

    torch.manual_seed(train_config.seed)
    if model_kind == "unet3d":
        model = UNet3D(unet_config or UNet3DConfig())
        train_data = build_volume_tensors(train_volumes, train_masks)
        val_data = build_volume_tensors(val_volumes, val_masks)
        forward_fn = None
        model_config = asdict(model.config)
    else:
        model = build_promptless_segmenter(vit_preset)
        set_freeze_policy(model, freeze_policy)
        size = model.config.image_size
        train_data = build_slice_tensors(train_volumes, train_masks, size)
        val_data = build_slice_tensors(val_volumes, val_masks, size)
        forward_fn = lambda m, xb: m.forward_upscaled(xb)
        model_config = asdict(model.config)

    train(
        model,
        train_data,
        val_data,
        train_config,
        forward_fn=forward_fn,
        run_dir=out_dir,
        device=device,
        checkpoint_meta={"model_kind": model_kind, "model_config": model_config},
    )
    write_manifest(
        out_dir,
        "train",
        {
            "data": str(data_dir),
            "model": model_kind,
            "vit_preset": vit_preset if model_kind == "promptless_vit" else None,
            "freeze_policy": freeze_policy if model_kind == "promptless_vit" else None,
            "train_config": asdict(train_config),
            "model_config": model_config,
        },
    )
    return out_dir


# ---------------------------------------------------------------------------
# predict / evaluate / report
# ---------------------------------------------------------------------------


def run_predict(checkpoint_path, data_dir, out_dir, part: str = "test", device: str | None = None) -> Path:
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    device = device or device_from_env()
    try:
        payload = load_checkpoint(checkpoint_path)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    model = build_model_from_checkpoint(payload)
    ids = split_case_ids(data_dir, part)
    if not ids:
        raise ConfigError(f"split part {part!r} has no cases in {data_dir}")
    for cid in ids:
        volume = load_volume(_case_dir(data_dir, cid) / "volume.mvol")
        if isinstance(model, PromptlessSegmenter):
            mask = predict_volume(model, volume, device=device)
        else:
            mask = predict_mask_volume(model, volume, device=device)
        save_mask(mask, _case_dir(out_dir, cid) / "mask.mvol")
    write_manifest(
        out_dir,
        "predict",
        {
            "checkpoint": str(checkpoint_path),
            "data": str(data_dir),
            "part": part,
            "model_kind": payload.get("model_kind"),
        },
    )
    return out_dir


def run_evaluate(
    pred_dir,
    data_dir,
    out_dir,
    part: str = "test",
    hd95_method: str = "pooled",
    connectivity: int = 26,
) -> Path:
    pred_dir = Path(pred_dir)
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    ids = split_case_ids(data_dir, part)
    if not ids:
        raise ConfigError(f"split part {part!r} has no cases in {data_dir}")
    predictions, truths = [], []
    for cid in ids:
        pred_path = _case_dir(pred_dir, cid) / "mask.mvol"
        if not pred_path.is_dir():
            raise ConfigError(f"missing prediction for case {cid} at {pred_path}")
        predictions.append(load_mask(pred_path))
        truths.append(load_mask(_case_dir(data_dir, cid) / "mask.mvol"))
    report = evaluate_test_set(
        predictions,
        truths,
        case_ids=ids,
        hd95_method=hd95_method,
        connectivity=connectivity,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    write_case_csv(report, out_dir / "per_case.csv")
    write_aggregate_json(report, out_dir / "aggregate.json")
    write_manifest(
        out_dir,
        "evaluate",
        {
            "pred": str(pred_dir),
            "data": str(data_dir),
            "part": part,
            "hd95_method": hd95_method,
            "connectivity": connectivity,
        },
    )
    return out_dir


def run_report(
    metrics_dirs,
    out_dir,
    labels=None,
    pred_dir=None,
    data_dir=None,
    part: str = "test",
) -> Path:
    """Violin plots of Dice/HD95 across one or more evaluation directories,
    Bland-Altman scatter per directory, and (when mask directories are given)
    top-down projection images per case."""
    metrics_dirs = [Path(d) for d in metrics_dirs]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if labels is None:
        labels = [d.name for d in metrics_dirs]
    if len(labels) != len(metrics_dirs):
        raise ConfigError("need one label per metrics directory")

    cases_by_label = {}
    for label, mdir in zip(labels, metrics_dirs):
        csv_path = mdir / "per_case.csv"
        if not csv_path.is_file():
            raise ConfigError(f"no per_case.csv in {mdir}")
        cases_by_label[label] = read_case_csv(csv_path)

    violin_plot(
        {lab: [c.dice for c in cases] for lab, cases in cases_by_label.items()},
        ylabel="Dice score",
        path_base=out_dir / "dice_violin",
    )
    violin_plot(
        {lab: [c.hd95_mm for c in cases] for lab, cases in cases_by_label.items()},
        ylabel="95th-percentile Hausdorff distance (mm)",
        path_base=out_dir / "hd95_violin",
    )
    for label, cases in cases_by_label.items():
        report = report_from_cases(cases)
        if report.bland_altman_stats is not None:
            bland_altman_plot(
                report.bland_altman_stats,
                out_dir / f"bland_altman_{label}",
                title=label,
            )

    if pred_dir is not None and data_dir is not None:
        proj_dir = out_dir / "projections"
        proj_dir.mkdir(exist_ok=True)
        for cid in split_case_ids(data_dir, part):
            pred = load_mask(_case_dir(pred_dir, cid) / "mask.mvol")
            truth = load_mask(_case_dir(data_dir, cid) / "mask.mvol")
            projection_image(pred, proj_dir / f"{cid}_pred.png")
            projection_image(truth, proj_dir / f"{cid}_gt.png")

    write_manifest(
        out_dir,
        "report",
        {
            "metrics": [str(d) for d in metrics_dirs],
            "labels": list(labels),
            "pred": str(pred_dir) if pred_dir else None,
            "data": str(data_dir) if data_dir else None,
        },
    )
    return out_dir


# ---------------------------------------------------------------------------
# whole experiment
# ---------------------------------------------------------------------------


def run_experiment(config: ExperimentConfig) -> dict:
    """Chain all stages under one root directory; returns the aggregate
    metrics of the held-out test set."""
    config.validate()
    root = Path(config.out_dir)
    run_phantom_gen(root / "data", count=config.phantom_count, seed=config.seed)
    run_preprocess(
        root / "data",
        root / "prep",
        counts=config.counts,
        seed=config.split_seed,
        window_lo=config.window[0],
        window_hi=config.window[1],
        margin_voxels=config.margin_voxels,
    )
    run_train(
        root / "prep",
        root / "run",
        model_kind=config.model_kind,
        train_config=config.train_config,
        unet_config=UNet3DConfig(
            base_features=config.unet_base_features, depth=config.unet_depth
        ),
        vit_preset=config.vit_preset,
        freeze_policy=config.freeze_policy,
    )
    run_predict(root / "run" / "best.pt", root / "prep", root / "pred", part="test")
    run_evaluate(root / "pred", root / "prep", root / "eval", part="test")
    run_report(
        [root / "eval"],
        root / "report",
        labels=[config.model_kind],
        pred_dir=root / "pred",
        data_dir=root / "prep",
    )
    return json.loads((root / "eval" / "aggregate.json").read_text())["aggregates"]
