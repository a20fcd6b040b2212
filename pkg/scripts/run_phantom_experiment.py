#!/usr/bin/env python3
"""End-to-end phantom experiment: generate data, preprocess, train, predict,
evaluate, and plot, under one output directory.

Examples:
    python scripts/run_phantom_experiment.py --out runs/unet --model unet3d
    python scripts/run_phantom_experiment.py --out runs/vit --model promptless_vit
"""

import argparse
import time

from meniseg.config import ExperimentConfig
from meniseg.pipeline import run_experiment
from meniseg.training import TrainConfig

MODEL_DEFAULTS = {
    "unet3d": TrainConfig(learning_rate=1e-3, batch_size=4, loss="bce_plus_dice", max_epochs=150),
    "promptless_vit": TrainConfig(learning_rate=1e-3, batch_size=8, loss="bce_plus_dice", max_epochs=25),
}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="experiment root directory")
    parser.add_argument("--model", choices=sorted(MODEL_DEFAULTS), default="unet3d")
    parser.add_argument("--count", type=int, default=20)
    parser.add_argument("--counts", type=int, nargs=3, default=(12, 4, 4))
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--learning-rate", type=float, default=None)
    parser.add_argument("--max-epochs", type=int, default=None)
    args = parser.parse_args()

    train_config = MODEL_DEFAULTS[args.model]
    if args.learning_rate is not None:
        train_config = TrainConfig(**{**train_config.__dict__, "learning_rate": args.learning_rate})
    if args.max_epochs is not None:
        train_config = TrainConfig(**{**train_config.__dict__, "max_epochs": args.max_epochs})

    config = ExperimentConfig(
        out_dir=args.out,
        model_kind=args.model,
        phantom_count=args.count,
        counts=tuple(args.counts),
        seed=args.seed,
        train_config=train_config,
    )

    t0 = time.monotonic()
    aggregates = run_experiment(config)
    print(f"\n=== {args.model} on {args.count} phantoms ({time.monotonic() - t0:.0f}s) ===")
    for metric in ("dice", "hd95_mm", "thickness_diff_mm", "components_pred"):
        agg = aggregates[metric]
        print(f"{metric:>20}: {agg['mean']:.4f} +/- {agg['sd']:.4f} (n={agg['n']})")
    print(f"artifacts under {args.out}")


if __name__ == "__main__":
    main()
