"""Optimization loop with validation-driven early stopping, plus random grid
search over discrete hyperparameter spaces and versioned checkpoint IO.

An epoch is one full seeded-shuffle pass over the training tensors. Training
halts once the validation loss has gone ``patience`` consecutive epochs
without strictly improving on the running minimum (a tie counts as a failure
to improve), and the returned weights are those of the best-validation epoch.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import DICE_SMOOTH, get_loss

ADAM_BETAS = (0.9, 0.999)

# Artifact defaults where the full-scale protocol left the budget unstated.
DEFAULT_MAX_EPOCHS = 200
DEFAULT_GRID_TRIALS = 12


class TrainingDiverged(RuntimeError):
    """Raised when a train or validation loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    loss: str = "bce_plus_dice"
    max_epochs: int = DEFAULT_MAX_EPOCHS
    patience: int = 5
    seed: int = 0
    dice_smooth: float = DICE_SMOOTH

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        get_loss(self.loss)


# Hyperparameters selected by the grid searches for the full-scale OAI runs.
TRAIN_PRESETS = {
    "vit_decoder_only": TrainConfig(learning_rate=5e-6, batch_size=8, loss="bce"),
    "vit_end_to_end": TrainConfig(learning_rate=5e-7, batch_size=16, loss="bce"),
    "unet3d": TrainConfig(learning_rate=1e-3, batch_size=4, loss="bce_plus_dice"),
}


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def to_rows(self):
        for i in range(self.epochs):
            yield {
                "epoch": i + 1,
                "train_loss": self.train_loss[i],
                "val_loss": self.val_loss[i],
                "seconds": self.epoch_seconds[i],
            }


class EarlyStopping:
    """Strict-improvement early stopping on the validation loss."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _iter_batches(n: int, batch_size: int, generator: torch.Generator | None):
    if generator is None:
        order = torch.arange(n)
    else:
        order = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _epoch_loss(model, inputs, targets, loss_fn, batch_size, forward_fn):
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for idx in _iter_batches(len(inputs), batch_size, generator=None):
            loss = loss_fn(forward_fn(model, inputs[idx]), targets[idx])
            total += float(loss) * len(idx)
            count += len(idx)
    return total / count


def train(
    model: torch.nn.Module,
    train_data: tuple[torch.Tensor, torch.Tensor],
    val_data: tuple[torch.Tensor, torch.Tensor],
    config: TrainConfig,
    forward_fn=None,
    run_dir=None,
    device="cpu",
    checkpoint_meta: dict | None = None,
) -> tuple[dict, TrainingHistory]:
    """Fit the trainable parameters; returns (best state_dict, history).

    ``forward_fn(model, batch)`` customizes the forward pass (defaults to
    ``model(batch)``). With ``run_dir`` set, a config snapshot, per-epoch CSV,
    checkpoints, and a summary JSON are written there.
    """
    config.validate()
    x_train, y_train = train_data
    x_val, y_val = val_data
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if forward_fn is None:
        forward_fn = lambda m, xb: m(xb)

    loss_name = config.loss
    base_loss = get_loss(loss_name)
    if loss_name in ("dice", "bce_plus_dice"):
        loss_fn = lambda lo, ta: base_loss(lo, ta, config.dice_smooth)
    else:
        loss_fn = base_loss

    model = model.to(device)
    x_train, y_train = x_train.to(device), y_train.to(device)
    x_val, y_val = x_val.to(device), y_val.to(device)

    trainable = [p for p in model.parameters() if p.requires_grad]
    if not trainable:
        raise ValueError("model has no trainable parameters")
    optimizer = torch.optim.Adam(trainable, lr=config.learning_rate, betas=ADAM_BETAS)

    generator = torch.Generator().manual_seed(config.seed)
    stopper = EarlyStopping(config.patience)
    history = TrainingHistory()
    best_state = None

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "train_config.json").write_text(json.dumps(asdict(config), indent=2) + "\n")

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.monotonic()
        model.train()
        total, count = 0.0, 0
        for idx in _iter_batches(len(x_train), config.batch_size, generator):
            optimizer.zero_grad(set_to_none=True)
            loss = loss_fn(forward_fn(model, x_train[idx]), y_train[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite training loss at epoch {epoch} "
                    f"(lr={config.learning_rate}, loss={loss_name})"
                )
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            count += len(idx)
        train_loss = total / count
        val_loss = _epoch_loss(model, x_val, y_val, loss_fn, config.batch_size, forward_fn)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")

        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.epoch_seconds.append(time.monotonic() - t0)

        improved = val_loss < stopper.best
        stop = stopper.update(val_loss)
        if improved:
            best_state = {
                k: v.detach().cpu().clone() for k, v in model.state_dict().items()
            }
        if stop:
            break

    history.best_epoch = stopper.best_epoch
    if run_dir is not None:
        _write_history_csv(run_dir / "history.csv", history)
        meta = dict(checkpoint_meta or {})
        save_checkpoint(
            run_dir / "best.pt",
            state_dict=best_state,
            train_config=config,
            epoch=history.best_epoch,
            **meta,
        )
        save_checkpoint(
            run_dir / "last.pt",
            state_dict=model.state_dict(),
            train_config=config,
            epoch=history.epochs,
            **meta,
        )
        summary = {
            "epochs": history.epochs,
            "best_epoch": history.best_epoch,
            "best_val_loss": history.best_val_loss,
            "final_train_loss": history.train_loss[-1],
        }
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return best_state, history


def _write_history_csv(path: Path, history: TrainingHistory):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "seconds"])
        writer.writeheader()
        for row in history.to_rows():
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Random grid search over a finite discrete space.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridTrial:
    params: dict
    score: float
    trial_index: int


def random_grid_search(space: dict, n_trials: int, seed: int, train_fn):
    """Evaluate ``n_trials`` distinct configurations sampled uniformly (seeded)
    from the product of ``space`` values; rank by the returned score
    (best validation loss, lower is better).

    Returns (best_params, leaderboard sorted best-first, ties by trial order).
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    keys = sorted(space)
    if not keys:
        raise ValueError("search space is empty")
    combos = list(itertools.product(*(list(space[k]) for k in keys)))
    if n_trials > len(combos):
        raise ValueError(f"n_trials={n_trials} exceeds the space size {len(combos)}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(combos), size=n_trials, replace=False)
    trials = []
    for t, combo_idx in enumerate(chosen):
        params = dict(zip(keys, combos[int(combo_idx)]))
        trials.append(GridTrial(params=params, score=float(train_fn(params)), trial_index=t))
    leaderboard = sorted(trials, key=lambda tr: (tr.score, tr.trial_index))
    return leaderboard[0].params, leaderboard


# ---------------------------------------------------------------------------
# Checkpoints: weights + model config + training seed, versioned, written
# atomically (temp file + rename).
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, state_dict, train_config: TrainConfig | None = None, **meta) -> Path:
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "state_dict": state_dict,
        "train_config": asdict(train_config) if train_config is not None else None,
        "seed": train_config.seed if train_config is not None else None,
    }
    payload.update(meta)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return payload


def build_model_from_checkpoint(payload: dict) -> torch.nn.Module:
    """Reconstruct a model from a checkpoint written by the pipeline (which
    stores ``model_kind`` and ``model_config``)."""
    from .promptless import PromptlessSegmenter, PromptlessViTConfig
    from .unet3d import UNet3D, UNet3DConfig

    kind = payload.get("model_kind")
    cfg = payload.get("model_config") or {}
    if kind == "unet3d":
        model = UNet3D(UNet3DConfig(**cfg))
    elif kind == "promptless_vit":
        cfg = dict(cfg)
        cfg["encoder_global_attn_indexes"] = tuple(cfg.get("encoder_global_attn_indexes", ()))
        model = PromptlessSegmenter(PromptlessViTConfig(**cfg))
    else:
        raise ValueError(f"checkpoint has unknown model_kind {kind!r}")
    model.load_state_dict(payload["state_dict"])
    return model
