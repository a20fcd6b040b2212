import hashlib
import json
import shutil
from pathlib import Path

import pytest

from meniseg.cli import main
from meniseg.preprocess import CropBox
from meniseg.volume import load_mask, load_volume


def dir_digest(root: Path) -> dict[str, str]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


def gen_dataset(tmp_path, count=6, seed=7, name="data", timepoints=1) -> Path:
    out = tmp_path / name
    rc = main(
        [
            "phantom-gen",
            "--out",
            str(out),
            "--count",
            str(count),
            "--seed",
            str(seed),
            "--timepoints",
            str(timepoints),
        ]
    )
    assert rc == 0
    return out


def preprocess(tmp_path, data: Path, counts=(4, 1, 1), name="prep", margin=3) -> Path:
    out = tmp_path / name
    rc = main(
        [
            "preprocess",
            "--data",
            str(data),
            "--out",
            str(out),
            "--counts",
            *[str(c) for c in counts],
            "--seed",
            "0",
            "--margin",
            str(margin),
        ]
    )
    assert rc == 0
    return out


class TestPhantomGen:
    def test_rerun_is_byte_identical(self, tmp_path):
        a = gen_dataset(tmp_path, count=3, seed=11, name="a")
        b = gen_dataset(tmp_path, count=3, seed=11, name="b")
        assert dir_digest(a) == dir_digest(b)

    def test_seed_changes_output(self, tmp_path):
        a = gen_dataset(tmp_path, count=2, seed=1, name="a")
        b = gen_dataset(tmp_path, count=2, seed=2, name="b")
        assert dir_digest(a) != dir_digest(b)

    def test_manifest_records_config_hash(self, tmp_path):
        data = gen_dataset(tmp_path, count=2)
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["stage"] == "phantom-gen"
        assert len(manifest["config_sha256"]) == 64
        assert "torch" in manifest["versions"]

    def test_timepoints_share_patient(self, tmp_path):
        data = gen_dataset(tmp_path, count=2, timepoints=2)
        index = json.loads((data / "cases.json").read_text())
        assert len(index["cases"]) == 4
        patients = {c["case_id"]: c["patient_id"] for c in index["cases"]}
        assert patients["p000_t0"] == patients["p000_t1"] == "p000"


class TestPreprocess:
    def test_outputs_and_split(self, tmp_path):
        data = gen_dataset(tmp_path, count=6, timepoints=2)
        prep = preprocess(tmp_path, data, counts=(4, 1, 1))
        split = json.loads((prep / "split.json").read_text())
        assert sorted(split["assignment"].values()).count("train") == 4
        # both time points of a patient land in the same part
        for case, part in split["volumes"].items():
            assert part == split["assignment"][case.split("_")[0]]
        box = CropBox.from_dict(json.loads((prep / "cropbox.json").read_text()))
        vol = load_volume(prep / "cases" / "p000_t0" / "volume.mvol")
        assert vol.shape == box.extents
        assert vol.data.min() >= 0.0 and vol.data.max() <= 1.0

    def test_count_mismatch_is_config_error(self, tmp_path):
        data = gen_dataset(tmp_path, count=3)
        rc = main(
            ["preprocess", "--data", str(data), "--out", str(tmp_path / "p"),
             "--counts", "3", "1", "1", "--seed", "0"]
        )
        assert rc == 1

    def test_missing_dataset_is_config_error(self, tmp_path):
        rc = main(
            ["preprocess", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "p"),
             "--counts", "1", "1", "1", "--seed", "0"]
        )
        assert rc == 1


class TestEvaluateAndReport:
    def test_perfect_predictions_score_dice_one(self, tmp_path):
        data = gen_dataset(tmp_path, count=6)
        prep = preprocess(tmp_path, data, counts=(4, 1, 1))
        # use the ground truth masks as predictions
        pred = tmp_path / "pred"
        split = json.loads((prep / "split.json").read_text())
        for case, part in split["volumes"].items():
            if part == "test":
                dst = pred / "cases" / case
                dst.mkdir(parents=True)
                shutil.copytree(prep / "cases" / case / "mask.mvol", dst / "mask.mvol")
        out = tmp_path / "eval"
        rc = main(["evaluate", "--pred", str(pred), "--data", str(prep), "--out", str(out)])
        assert rc == 0
        agg = json.loads((out / "aggregate.json").read_text())
        assert agg["aggregates"]["dice"]["mean"] == 1.0
        assert agg["aggregates"]["hd95_mm"]["mean"] == 0.0

        report_dir = tmp_path / "report"
        rc = main(
            ["report", "--metrics", str(out), "--out", str(report_dir),
             "--pred", str(pred), "--data", str(prep)]
        )
        assert rc == 0
        assert (report_dir / "dice_violin.png").exists()
        assert (report_dir / "hd95_violin.png").exists()
        assert list((report_dir / "projections").glob("*_pred.png"))

    def test_missing_prediction_is_config_error(self, tmp_path):
        data = gen_dataset(tmp_path, count=6)
        prep = preprocess(tmp_path, data, counts=(4, 1, 1))
        rc = main(
            ["evaluate", "--pred", str(tmp_path / "empty"), "--data", str(prep),
             "--out", str(tmp_path / "eval")]
        )
        assert rc == 1


class TestTrainPredictCompose:
    def test_micro_train_and_predict(self, tmp_path):
        data = gen_dataset(tmp_path, count=6)
        prep = preprocess(tmp_path, data, counts=(4, 1, 1))
        run = tmp_path / "run"
        rc = main(
            ["train", "--data", str(prep), "--out", str(run), "--model", "unet3d",
             "--base-features", "2", "--depth", "1", "--max-epochs", "2",
             "--batch-size", "2", "--seed", "3"]
        )
        assert rc == 0
        assert (run / "best.pt").exists()
        pred = tmp_path / "pred"
        rc = main(
            ["predict", "--checkpoint", str(run / "best.pt"), "--data", str(prep),
             "--out", str(pred), "--part", "test"]
        )
        assert rc == 0
        split = json.loads((prep / "split.json").read_text())
        test_cases = [c for c, p in split["volumes"].items() if p == "test"]
        for case in test_cases:
            mask = load_mask(pred / "cases" / case / "mask.mvol")
            gt = load_mask(prep / "cases" / case / "mask.mvol")
            assert mask.shape == gt.shape
        out = tmp_path / "eval"
        rc = main(["evaluate", "--pred", str(pred), "--data", str(prep), "--out", str(out)])
        assert rc == 0

    def test_config_file_supplies_defaults(self, tmp_path):
        data = gen_dataset(tmp_path, count=2, name="cfgdata")
        cfg = tmp_path / "exp.toml"
        cfg.write_text('[phantom_gen]\ncount = 2\nseed = 11\n')
        out_a = tmp_path / "with_file"
        rc = main(["phantom-gen", "--config", str(cfg), "--out", str(out_a), "--seed", "11"])
        assert rc == 0
        index = json.loads((out_a / "cases.json").read_text())
        assert len(index["cases"]) == 2

    def test_flag_overrides_config_file(self, tmp_path):
        cfg = tmp_path / "exp.toml"
        cfg.write_text('[phantom_gen]\ncount = 5\n')
        out = tmp_path / "d"
        rc = main(["phantom-gen", "--config", str(cfg), "--out", str(out), "--count", "2"])
        assert rc == 0
        index = json.loads((out / "cases.json").read_text())
        assert len(index["cases"]) == 2


def test_device_env_var(monkeypatch):
    from meniseg.pipeline import device_from_env

    monkeypatch.delenv("MENISEG_DEVICE", raising=False)
    assert device_from_env() == "cpu"
    monkeypatch.setenv("MENISEG_DEVICE", "cuda:1")
    assert device_from_env() == "cuda:1"


class TestExperimentConfig:
    def test_validation(self):
        from meniseg.config import ConfigError, ExperimentConfig

        with pytest.raises(ConfigError, match="model kind"):
            ExperimentConfig(out_dir="x", model_kind="cnn").validate()
        with pytest.raises(ConfigError, match="sum"):
            ExperimentConfig(out_dir="x", phantom_count=10, counts=(4, 4, 4)).validate()

    def test_micro_run_experiment(self, tmp_path):
        from meniseg.config import ExperimentConfig
        from meniseg.pipeline import run_experiment
        from meniseg.training import TrainConfig

        config = ExperimentConfig(
            out_dir=str(tmp_path / "exp"),
            model_kind="unet3d",
            phantom_count=6,
            counts=(4, 1, 1),
            seed=3,
            unet_base_features=2,
            unet_depth=1,
            train_config=TrainConfig(batch_size=2, max_epochs=2, seed=0),
        )
        aggregates = run_experiment(config)
        assert set(aggregates) >= {"dice", "hd95_mm", "thickness_diff_mm"}
        root = tmp_path / "exp"
        for stage in ("data", "prep", "run", "pred", "eval", "report"):
            assert (root / stage / "manifest.json").exists() or stage == "run"
        assert (root / "run" / "best.pt").exists()
        assert (root / "report" / "dice_violin.png").exists()


class TestExitCodes:
    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert main(["phantom-gen"]) == 1

    def test_unknown_preset(self, tmp_path):
        rc = main(
            ["train", "--data", str(tmp_path), "--out", str(tmp_path / "r"),
             "--model", "unet3d", "--preset", "bogus"]
        )
        assert rc == 1
