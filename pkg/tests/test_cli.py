"""End-to-end CLI tests: every subcommand, exit codes, audit trail."""

import json
from pathlib import Path

import numpy as np
import pytest

from flexinet import distill as DS
from flexinet.cli import main
from flexinet.data import SCENES, load_tau_metadata


TRAIN_FLAGS = ["--set", "train.epochs=2", "--set", "train.batch_size=16",
               "--set", "train.lr=0.02",
               "--set", "arch.stem_channels=[4,6]", "--set", "arch.stages=[[1,8,2]]",
               "--set", "arch.preset=null"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared corpus + trained model for the command pipeline."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    rc = main(["make-data", "--out", str(corpus),
               "--set", "data.synthetic={\"train_clips_per_cell\":1,"
               "\"test_clips_per_cell\":1,\"seed\":13}"])
    assert rc == 0
    run = root / "run"
    rc = main(["train", "--config", _write_train_config(root, corpus),
               "--out", str(run)] + TRAIN_FLAGS)
    assert rc == 0
    return root, corpus, run


def _write_train_config(root, corpus):
    path = root / "train_config.json"
    path.write_text(json.dumps({
        "data": {"corpus": str(corpus)},
        "augment": {"adir": {"enable": False}, "fms": {"enable": False}},
    }))
    return str(path)


class TestMakeDataAndTrain:
    def test_corpus_layout(self, workspace):
        _, corpus, _ = workspace
        records = load_tau_metadata(corpus / "meta.csv")
        assert len(records) == 10 * 6 + 10 * 9  # 1 train/cell + 1 test/cell
        assert (corpus / "config.json").exists()

    def test_train_outputs(self, workspace):
        _, _, run = workspace
        assert (run / "model.fxn").exists()
        assert (run / "config.json").exists()
        assert (run / "training_curves.png").exists()
        rows = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
        assert len(rows) == 2
        assert rows[0]["epoch"] == 0

    def test_resolved_config_echoed(self, workspace):
        _, _, run = workspace
        cfg = json.loads((run / "config.json").read_text())
        assert cfg["train"]["epochs"] == 2
        assert cfg["augment"]["adir"]["enable"] is False


class TestEval:
    def test_eval_float_model(self, workspace, tmp_path):
        _, corpus, run = workspace
        out = tmp_path / "eval"
        rc = main(["eval", "--model", str(run / "model.fxn"),
                   "--data", str(corpus), "--split", "test", "--out", str(out)])
        assert rc == 0
        for name in ("report.json", "report.txt", "device_accuracy.csv",
                     "confusion_matrix.csv", "confusion_matrix.png",
                     "device_accuracy.png", "config.json"):
            assert (out / name).exists(), name
        rep = json.loads((out / "report.json").read_text())
        assert set(rep["per_device_accuracy"]) == {"A", "B", "C", "S1", "S2",
                                                   "S3", "S4", "S5", "S6"}
        # CSV and JSON agree
        lines = (out / "device_accuracy.csv").read_text().splitlines()
        assert lines[0].split(",")[-1] == "ACC"
        acc_csv = float(lines[1].split(",")[-1])
        assert acc_csv == pytest.approx(100 * rep["macro_accuracy"], abs=1e-3)

    def test_eval_empty_split_errors(self, workspace, tmp_path):
        _, corpus, run = workspace
        rc = main(["eval", "--model", str(run / "model.fxn"),
                   "--data", str(corpus), "--split", "unused",
                   "--out", str(tmp_path / "x")])
        assert rc == 1


class TestQuantize:
    def test_quantize_then_eval_int8(self, workspace, tmp_path):
        _, corpus, run = workspace
        qdir = tmp_path / "quant"
        rc = main(["quantize", "--model", str(run / "model.fxn"),
                   "--calibration", str(corpus), "--out", str(qdir)])
        assert rc == 0
        assert (qdir / "model-int8.fxq").exists()
        assert (qdir / "size_report.json").exists()
        out = tmp_path / "eval8"
        rc = main(["eval", "--model", str(qdir / "model-int8.fxq"),
                   "--data", str(corpus), "--split", "test", "--out", str(out)])
        assert rc == 0

    def test_quantize_rerun_deterministic(self, workspace, tmp_path):
        _, corpus, run = workspace
        d1, d2 = tmp_path / "q1", tmp_path / "q2"
        for d in (d1, d2):
            rc = main(["quantize", "--model", str(run / "model.fxn"),
                       "--calibration", str(corpus), "--out", str(d)])
            assert rc == 0
        assert (d1 / "model-int8.fxq").read_bytes() == (d2 / "model-int8.fxq").read_bytes()

    def test_missing_calibration_errors(self, workspace, tmp_path):
        _, _, run = workspace
        rc = main(["quantize", "--model", str(run / "model.fxn"),
                   "--calibration", "/nonexistent/meta.csv",
                   "--out", str(tmp_path / "q")])
        assert rc == 1


class TestFeatures:
    def test_extract_and_rerun_identical(self, workspace, tmp_path):
        _, corpus, _ = workspace
        out1, out2 = tmp_path / "f1", tmp_path / "f2"
        for out in (out1, out2):
            rc = main(["features", "--in", str(corpus / "audio"), "--out", str(out)])
            assert rc == 0
        files = sorted(out1.glob("*.fxf"))
        assert files
        for f in files[:5]:
            assert f.read_bytes() == (out2 / f.name).read_bytes()
        assert json.loads((out1 / "failures.json").read_text()) == {}

    def test_corrupt_wav_in_manifest(self, workspace, tmp_path):
        in_dir = tmp_path / "wavs"
        in_dir.mkdir()
        (in_dir / "bad.wav").write_bytes(b"not a wav at all")
        out = tmp_path / "feats"
        rc = main(["features", "--in", str(in_dir), "--out", str(out)])
        assert rc == 1
        manifest = json.loads((out / "failures.json").read_text())
        assert "bad.wav" in manifest

    def test_empty_dir_warns_exit_zero(self, tmp_path):
        in_dir = tmp_path / "empty"
        in_dir.mkdir()
        rc = main(["features", "--in", str(in_dir), "--out", str(tmp_path / "out")])
        assert rc == 0


class TestDistillFit:
    def _write_logits(self, corpus, path, seed=0):
        records = load_tau_metadata(corpus / "meta.csv")
        labels = np.array([r.label_index for r in records])
        stacked = DS.synthetic_teacher_logits(labels, margins=[5, 4, 0.5],
                                              noises=[0.6, 0.9, 2.0], seed=seed)
        tl = DS.TeacherLogits(["t0", "t1", "t2"], list(SCENES),
                              {r.clip_id: stacked[i] for i, r in enumerate(records)})
        DS.write_logits_text(path, tl)
        return tl

    def test_fit_writes_fusion(self, workspace, tmp_path):
        _, corpus, _ = workspace
        logits_path = tmp_path / "logits.txt"
        self._write_logits(corpus, logits_path)
        out = tmp_path / "fit"
        rc = main(["distill-fit", "--logits", str(logits_path),
                   "--meta", str(corpus), "--out", str(out)])
        assert rc == 0
        fusion = json.loads((out / "fusion.json").read_text())
        assert len(fusion["alpha"]) == 3
        report = json.loads((out / "fit_report.json").read_text())
        assert report["ce_fitted"] <= report["ce_uniform"] + 1e-6
        # fusion params round-trip
        params = DS.FusionParams.load(out / "fusion.json")
        np.testing.assert_allclose(params.alpha, fusion["alpha"])

    def test_train_with_kd_modes(self, workspace, tmp_path):
        root, corpus, _ = workspace
        logits_path = tmp_path / "logits.txt"
        self._write_logits(corpus, logits_path, seed=1)
        fit_out = tmp_path / "fit"
        assert main(["distill-fit", "--logits", str(logits_path),
                     "--meta", str(corpus), "--out", str(fit_out)]) == 0
        out = tmp_path / "kd_run"
        rc = main(["train", "--config", _write_train_config(root, corpus),
                   "--out", str(out),
                   "--set", "distill.mode=fitted",
                   "--set", f"distill.logits={logits_path}",
                   "--set", f"distill.fusion_params={fit_out / 'fusion.json'}"]
                  + TRAIN_FLAGS)
        assert rc == 0
        assert (out / "model.fxn").exists()

    def test_kd_without_logits_is_config_error(self, workspace, tmp_path):
        root, corpus, _ = workspace
        rc = main(["train", "--config", _write_train_config(root, corpus),
                   "--out", str(tmp_path / "bad"),
                   "--set", "distill.mode=uniform"] + TRAIN_FLAGS)
        assert rc == 1

    def test_fusion_teacher_count_mismatch_errors(self, workspace, tmp_path):
        root, corpus, _ = workspace
        logits_path = tmp_path / "logits.txt"
        self._write_logits(corpus, logits_path, seed=2)
        bad_fusion = tmp_path / "bad_fusion.json"
        bad_fusion.write_text(json.dumps({"alpha": [0.5, 0.5], "beta": [0.0] * 10}))
        rc = main(["train", "--config", _write_train_config(root, corpus),
                   "--out", str(tmp_path / "bad2"),
                   "--set", "distill.mode=fitted",
                   "--set", f"distill.logits={logits_path}",
                   "--set", f"distill.fusion_params={bad_fusion}"] + TRAIN_FLAGS)
        assert rc == 1


class TestEnergyHist:
    def test_histogram_outputs(self, workspace, tmp_path):
        _, corpus, _ = workspace
        out = tmp_path / "energy"
        rc = main(["energy-hist", "--data", str(corpus), "--out", str(out),
                   "--bins", "20"])
        assert rc == 0
        doc = json.loads((out / "energy.json").read_text())
        assert doc["n_clips"] == 150
        assert doc["mean_energy"] > 0
        assert (out / "energy.png").exists()
        assert (out / "energy.csv").read_text().startswith("bin_left")


class TestExitCodes:
    def test_unknown_config_key_is_user_error(self, tmp_path):
        rc = main(["make-data", "--out", str(tmp_path / "x"),
                   "--set", "train.bogus=1"])
        assert rc == 1

    def test_bad_subcommand_usage(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["train"])  # missing --out
        assert e.value.code == 1

    def test_seed_env_override(self, workspace, tmp_path, monkeypatch):
        root, corpus, _ = workspace
        monkeypatch.setenv("FLEXINET_SEED", "123")
        out = tmp_path / "seeded"
        rc = main(["train", "--config", _write_train_config(root, corpus),
                   "--out", str(out), "--set", "train.epochs=1"] + TRAIN_FLAGS[2:])
        assert rc == 0
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["train"]["seed"] == 123
