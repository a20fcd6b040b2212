"""Command line interface.

Subcommands mirror the pipeline stages: phantom-gen, preprocess, train,
predict, evaluate, report. Defaults can come from a TOML config file
(``--config``); explicit flags override file values. Exit codes: 0 success,
1 configuration error (bad flags/config/missing inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from dataclasses import asdict

from . import pipeline
from .config import ConfigError, load_toml
from .training import TRAIN_PRESETS, TrainConfig
from .unet3d import UNet3DConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_config_flag(p):
    p.add_argument("--config", help="TOML file whose [<subcommand>] table supplies defaults")


def build_parser() -> _Parser:
    parser = _Parser(prog="meniseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", parents=[], help="generate a synthetic phantom dataset")
    _add_config_flag(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", type=int, nargs=3, default=None, metavar=("X", "Y", "Z"))
    p.add_argument("--spacing", type=float, nargs=3, default=None, metavar=("SX", "SY", "SZ"))
    p.add_argument("--timepoints", type=int, default=1)
    p.add_argument("--noise-level", type=float, default=None)
    p.add_argument("--distractor-level", type=float, default=None)

    p = sub.add_parser("preprocess", help="window, split, and crop a dataset")
    _add_config_flag(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--counts", type=int, nargs=3, required=True, metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=float, nargs=2, default=[0.0, 0.005], metavar=("LO", "HI"))
    p.add_argument("--margin", type=int, default=20)

    p = sub.add_parser("train", help="train a model on a preprocessed dataset")
    _add_config_flag(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=pipeline.MODEL_KINDS, required=True)
    p.add_argument("--preset", default=None, help=f"training preset: {sorted(TRAIN_PRESETS)}")
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--loss", default=None, choices=["bce", "dice", "bce_plus_dice"])
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--base-features", type=int, default=16, help="unet3d width")
    p.add_argument("--depth", type=int, default=3, help="unet3d depth")
    p.add_argument("--vit-preset", choices=["toy", "base"], default="toy")
    p.add_argument("--freeze-policy", choices=["decoder_only", "end_to_end"], default="end_to_end")

    p = sub.add_parser("predict", help="predict masks for one split part")
    _add_config_flag(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--part", default="test", choices=["train", "validation", "test"])

    p = sub.add_parser("evaluate", help="compute metrics of predictions vs ground truth")
    _add_config_flag(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--part", default="test", choices=["train", "validation", "test"])
    p.add_argument("--hd95-method", default="pooled", choices=["pooled", "directed_max"])
    p.add_argument("--connectivity", type=int, default=26, choices=[6, 18, 26])

    p = sub.add_parser("report", help="emit plots from evaluation directories")
    _add_config_flag(p)
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", nargs="+", default=None)
    p.add_argument("--pred", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--part", default="test", choices=["train", "validation", "test"])

    return parser


def _apply_config_file(args):
    """TOML values fill in flags the user left at their defaults."""
    if not getattr(args, "config", None):
        return args
    table = load_toml(args.config).get(args.command.replace("-", "_"), {})
    parser = build_parser()
    defaults = parser.parse_args(_reconstruct_minimal(args))
    for key, value in table.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        if getattr(args, attr) == getattr(defaults, attr, None):
            setattr(args, attr, value)
    return args


def _reconstruct_minimal(args):
    """Minimal argv that re-parses to pure defaults for this subcommand."""
    argv = [args.command]
    required = {
        "phantom-gen": ["--out", "x"],
        "preprocess": ["--data", "x", "--out", "x", "--counts", "1", "1", "1"],
        "train": ["--data", "x", "--out", "x", "--model", "unet3d"],
        "predict": ["--checkpoint", "x", "--data", "x", "--out", "x"],
        "evaluate": ["--pred", "x", "--data", "x", "--out", "x"],
        "report": ["--metrics", "x", "--out", "x"],
    }
    return argv + required[args.command]


def _train_config(args) -> TrainConfig:
    base = TRAIN_PRESETS.get(args.preset) if args.preset else None
    if args.preset and base is None:
        raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(TRAIN_PRESETS)}")
    cfg = asdict(base) if base else asdict(TrainConfig())
    for key in ("learning_rate", "batch_size", "loss", "max_epochs", "patience", "seed"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    config = TrainConfig(**cfg)
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return config


def _dispatch(args) -> None:
    if args.command == "phantom-gen":
        kwargs = {}
        if args.shape is not None:
            kwargs["shape"] = tuple(args.shape)
        if args.spacing is not None:
            kwargs["spacing"] = tuple(args.spacing)
        pipeline.run_phantom_gen(
            args.out,
            count=args.count,
            seed=args.seed,
            timepoints=args.timepoints,
            noise_level=args.noise_level,
            distractor_level=args.distractor_level,
            **kwargs,
        )
    elif args.command == "preprocess":
        pipeline.run_preprocess(
            args.data,
            args.out,
            counts=tuple(args.counts),
            seed=args.seed,
            window_lo=args.window[0],
            window_hi=args.window[1],
            margin_voxels=args.margin,
        )
    elif args.command == "train":
        pipeline.run_train(
            args.data,
            args.out,
            model_kind=args.model,
            train_config=_train_config(args),
            unet_config=UNet3DConfig(base_features=args.base_features, depth=args.depth),
            vit_preset=args.vit_preset,
            freeze_policy=args.freeze_policy,
        )
    elif args.command == "predict":
        pipeline.run_predict(args.checkpoint, args.data, args.out, part=args.part)
    elif args.command == "evaluate":
        pipeline.run_evaluate(
            args.pred,
            args.data,
            args.out,
            part=args.part,
            hd95_method=args.hd95_method,
            connectivity=args.connectivity,
        )
    elif args.command == "report":
        pipeline.run_report(
            args.metrics,
            args.out,
            labels=args.labels,
            pred_dir=args.pred,
            data_dir=args.data,
            part=args.part,
        )
    else:  # pragma: no cover - argparse enforces the choices
        raise ConfigError(f"unknown subcommand {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(args)
        _dispatch(args)
        return 0
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"meniseg: configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
