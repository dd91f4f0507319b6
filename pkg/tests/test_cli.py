import hashlib
import json

import numpy as np
import pytest

from mr2ct.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_LAYOUT,
    EXIT_OK,
    EXIT_USAGE,
    main,
)
from mr2ct.volume import read_volume

FAST = [
    "--order", "first",
    "--trees", "4",
    "--max-splits", "12",
    "--min-leaf", "5",
    "--em-restarts", "2",
    "--em-max-iter", "100",
    "--j-candidates", "1,2",
]


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    rc = main([
        "phantom", "--out", str(out), "--patients", "3",
        "--dims", "12,12,12", "--seed", "1",
    ])
    assert rc == EXIT_OK
    return out


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory, cohort_dir):
    out = tmp_path_factory.mktemp("model")
    rc = main([
        "train", "--cohort", str(cohort_dir), "--out", str(out), "--seed", "7", *FAST,
    ])
    assert rc == EXIT_OK
    return out


class TestPhantom:
    def test_writes_cohort_and_truth(self, cohort_dir):
        patients = sorted(p.name for p in cohort_dir.iterdir() if p.is_dir())
        assert patients == ["phantom000", "phantom001", "phantom002"]
        for name in patients:
            pdir = cohort_dir / name
            assert (pdir / "ct.hdr").exists()
            assert (pdir / "mask.hdr").exists()
            assert (pdir / "true_labels.hdr").exists()
            assert len(list(pdir.glob("mr*.hdr"))) == 4
        truth = json.loads((cohort_dir / "truth.json").read_text())
        assert len(truth["class_models"]) == 2

    def test_manifest_checksums(self, cohort_dir):
        manifest = json.loads((cohort_dir / "manifest.json").read_text())
        assert manifest["command"] == "phantom"
        for rel, digest in manifest["artifacts"].items():
            data = (cohort_dir / rel).read_bytes()
            assert hashlib.sha256(data).hexdigest() == digest

    def test_volumes_readable(self, cohort_dir):
        vol = read_volume(cohort_dir / "phantom000" / "ct.hdr")
        assert vol.dims == (12, 12, 12)


class TestTrain:
    def test_outputs(self, model_dir):
        assert (model_dir / "model.json").exists()
        report = json.loads((model_dir / "train_report.json").read_text())
        assert report["n_patients"] == 3
        assert len(report["selection"]) == 2
        manifest = json.loads((model_dir / "manifest.json").read_text())
        assert "model.json" in manifest["artifacts"]

    def test_byte_identical_reruns(self, tmp_path, cohort_dir):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        for out in (out_a, out_b):
            rc = main([
                "train", "--cohort", str(cohort_dir), "--out", str(out),
                "--seed", "3", *FAST,
            ])
            assert rc == EXIT_OK
        assert (out_a / "model.json").read_bytes() == (out_b / "model.json").read_bytes()

    def test_seed_changes_bundle(self, tmp_path, cohort_dir, model_dir):
        out = tmp_path / "other-seed"
        rc = main([
            "train", "--cohort", str(cohort_dir), "--out", str(out),
            "--seed", "8", *FAST,
        ])
        assert rc == EXIT_OK
        assert (out / "model.json").read_bytes() != (model_dir / "model.json").read_bytes()

    def test_missing_cohort(self, tmp_path):
        rc = main(["train", "--cohort", str(tmp_path / "nope"), "--out",
                   str(tmp_path / "out")])
        assert rc == EXIT_DATA


class TestPredict:
    def test_predicts_volumes(self, tmp_path, cohort_dir, model_dir):
        out = tmp_path / "pred"
        rc = main([
            "predict", "--model", str(model_dir / "model.json"),
            "--patient", str(cohort_dir / "phantom002"), "--out", str(out),
        ])
        assert rc == EXIT_OK
        estimate = read_volume(out / "ct_estimate.hdr")
        truth = read_volume(cohort_dir / "phantom002" / "ct.hdr")
        assert estimate.dims == truth.dims
        mae = np.abs(estimate.data - truth.data).mean()
        assert mae < 100.0
        labels = read_volume(out / "labels.hdr")
        assert set(np.unique(labels.data)) <= {0.0, 1.0}

    def test_channel_mismatch_exit_code(self, tmp_path, cohort_dir, model_dir):
        patient = cohort_dir / "phantom000"
        stripped = tmp_path / "stripped"
        stripped.mkdir()
        for name in ("mr0", "mr1", "mr2"):  # one channel short
            for ext in (".hdr", ".raw"):
                (stripped / (name + ext)).write_bytes(
                    (patient / (name + ext)).read_bytes()
                )
        for ext in (".hdr", ".raw"):
            (stripped / ("mask" + ext)).write_bytes((patient / ("mask" + ext)).read_bytes())
        rc = main([
            "predict", "--model", str(model_dir / "model.json"),
            "--patient", str(stripped), "--out", str(tmp_path / "out"),
        ])
        assert rc == EXIT_LAYOUT


class TestEvaluate:
    def test_full_report(self, tmp_path, cohort_dir):
        out = tmp_path / "eval"
        rc = main([
            "evaluate", "--cohort", str(cohort_dir), "--out", str(out),
            "--seed", "2", *FAST,
        ])
        assert rc == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert len(summary["per_patient"]) == 3
        assert summary["mean_mae"] < 100.0
        lines = (out / "residual_curves.csv").read_text().strip().splitlines()
        assert lines[0].startswith("window_center_hu")
        assert len(lines) > 2


class TestCvClassifier:
    def test_metrics_written(self, tmp_path, cohort_dir):
        out = tmp_path / "cv"
        rc = main([
            "cv-classifier", "--cohort", str(cohort_dir), "--out", str(out),
            "--cv-folds", "3", "--seed", "2", *FAST,
        ])
        assert rc == EXIT_OK
        payload = json.loads((out / "cv_metrics.json").read_text())
        assert payload["metrics"]["err"] <= 0.05
        assert len(payload["folds"]) == 3


class TestConfigHandling:
    def test_unknown_subcommand(self, capsys):
        rc = main(["frobnicate"])
        assert rc == EXIT_USAGE
        capsys.readouterr()

    def test_invalid_config_value(self, tmp_path):
        rc = main([
            "phantom", "--out", str(tmp_path / "x"), "--order", "first",
            "--trees", "0",
        ])
        assert rc == EXIT_CONFIG

    def test_config_file_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 5\ntrees = 2\n# comment\nmin_leaf = 3\n")
        out = tmp_path / "phantom"
        rc = main([
            "phantom", "--out", str(out), "--patients", "1", "--dims", "8,8,8",
            "--config", str(cfg), "--seed", "9",
        ])
        assert rc == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 9      # flag wins
        assert manifest["config"]["trees"] == 2     # file wins over default
        assert manifest["config"]["min_leaf"] == 3

    def test_env_var_config(self, tmp_path, monkeypatch):
        cfg = tmp_path / "env.cfg"
        cfg.write_text("seed = 77\n")
        monkeypatch.setenv("MR2CT_CONFIG", str(cfg))
        out = tmp_path / "phantom-env"
        rc = main(["phantom", "--out", str(out), "--patients", "1", "--dims", "8,8,8"])
        assert rc == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 77

    def test_malformed_config_file(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("this is not a key value line\n")
        rc = main(["phantom", "--out", str(tmp_path / "x"), "--config", str(cfg)])
        assert rc == EXIT_CONFIG

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("warp_speed = 9\n")
        rc = main(["phantom", "--out", str(tmp_path / "x"), "--config", str(cfg)])
        assert rc == EXIT_CONFIG
