"""Experiment configuration: TOML files with CLI override, config hashing, and
stage manifests for reproducibility."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration or missing inputs; mapped to exit code 1."""


@dataclass(frozen=True)
class ExperimentConfig:
    """One whole experiment, phantom generation through report.

    ``seed`` drives phantom sampling; the split and training seeds are carried
    by ``split_seed`` and ``train_config.seed`` and recorded in the stage
    manifests, so every stochastic stage is pinned.
    """

    out_dir: str
    model_kind: str = "unet3d"
    phantom_count: int = 20
    counts: tuple[int, int, int] = (12, 4, 4)
    seed: int = 7
    split_seed: int = 0
    window: tuple[float, float] = (0.0, 0.005)
    margin_voxels: int = 4
    train_config: TrainConfig = field(default_factory=TrainConfig)
    unet_base_features: int = 16
    unet_depth: int = 2
    vit_preset: str = "toy"
    freeze_policy: str = "end_to_end"

    def validate(self):
        if self.model_kind not in ("unet3d", "promptless_vit"):
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        if self.phantom_count != sum(self.counts) or any(c < 1 for c in self.counts):
            raise ConfigError(
                f"counts {self.counts} must be positive and sum to {self.phantom_count}"
            )
        try:
            self.train_config.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def load_toml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _versions() -> dict:
    import numpy
    import scipy
    import torch

    from . import __version__

    return {
        "meniseg": __version__,
        "python": ".".join(map(str, sys.version_info[:3])),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def write_manifest(out_dir, stage: str, config: dict) -> Path:
    """Record what produced an artifact directory. Deliberately timestamp-free
    so data-only stages rerun byte-identically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "stage": stage,
        "config": config,
        "config_sha256": config_hash(config),
        "versions": _versions(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def read_manifest(out_dir) -> dict:
    path = Path(out_dir) / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"no manifest.json in {out_dir}")
    return json.loads(path.read_text())
