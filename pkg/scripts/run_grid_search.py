#!/usr/bin/env python3
"""Random grid search over batch size and learning rate for the toy U-Net on
a small phantom set, mirroring the hyperparameter-selection protocol.

Example:
    python scripts/run_grid_search.py --trials 4 --epochs 8
"""

import argparse
import json
from pathlib import Path

import torch

from meniseg.phantom import generate_phantom, sample_spec
from meniseg.pipeline import build_volume_tensors
from meniseg.preprocess import compute_crop_box, crop, window_rescale
from meniseg.training import TrainConfig, random_grid_search, train
from meniseg.unet3d import UNet3D, UNet3DConfig

import numpy as np


def make_data(n, seed):
    rng = np.random.default_rng(seed)
    volumes, masks = [], []
    for i in range(n):
        spec = sample_spec(rng, seed=int(rng.integers(0, 2**31 - 1)))
        v, m = generate_phantom(spec)
        volumes.append(v)
        masks.append(m)
    box = compute_crop_box(masks, margin_voxels=4)
    volumes = [crop(window_rescale(v), box) for v in volumes]
    masks = [crop(m, box) for m in masks]
    return build_volume_tensors(volumes, masks)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--trials", type=int, default=4)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="optional JSON leaderboard path")
    args = parser.parse_args()

    x_train, y_train = make_data(8, seed=args.seed)
    x_val, y_val = make_data(3, seed=args.seed + 1)

    space = {"learning_rate": [3e-4, 1e-3, 3e-3], "batch_size": [2, 4]}

    def evaluate(params):
        torch.manual_seed(args.seed)
        model = UNet3D(UNet3DConfig(base_features=8, depth=2))
        config = TrainConfig(
            learning_rate=params["learning_rate"],
            batch_size=params["batch_size"],
            loss="bce_plus_dice",
            max_epochs=args.epochs,
            patience=5,
            seed=args.seed,
        )
        _, history = train(model, (x_train, y_train), (x_val, y_val), config)
        print(
            f"  lr={params['learning_rate']:g} bs={params['batch_size']}: "
            f"best val {history.best_val_loss:.4f} @ epoch {history.best_epoch}"
        )
        return history.best_val_loss

    best, leaderboard = random_grid_search(space, args.trials, args.seed, evaluate)
    print(f"\nbest configuration: {best}")
    if args.out:
        rows = [{"params": t.params, "score": t.score} for t in leaderboard]
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
        print(f"leaderboard written to {args.out}")


if __name__ == "__main__":
    main()
