"""Command-line tests: the full workflow end to end at smoke scale, exit
codes, manifests, and report artifacts (CSV + figure next to text)."""

import json
from pathlib import Path

import pytest

from microyolo.cli import main

REPO = Path(__file__).resolve().parent.parent
REF_CFG = str(REPO / "configs" / "ref88-1class.cfg")
DEVICES = str(REPO / "fixtures" / "devices.csv")

SMOKE_CFG_TEXT = """\
input 3 88 88
head 4 2 1
conv3x3 3 8
relu
maxpool2x2
conv3x3 8 8
relu
maxpool2x2
conv3x3 8 8
relu
maxpool2x2
conv3x3 8 16
relu
maxpool2x2
flatten
fc 400 64
relu
fc 64 176
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "smoke.cfg").write_text(SMOKE_CFG_TEXT)
    return root


@pytest.fixture(scope="module")
def dataset(workdir):
    rc = main(["dataset-gen", "--n", "40", "--classes", "1", "--seed", "7",
               "--max-objects", "3", "--out", str(workdir / "ds")])
    assert rc == 0
    return workdir / "ds"


@pytest.fixture(scope="module")
def trained(workdir, dataset):
    out = workdir / "run"
    rc = main(["train", "--dataset", str(dataset), "--model",
               str(workdir / "smoke.cfg"), "--epochs-float", "2",
               "--epochs-qat", "2", "--batch-size", "16", "--lr", "2e-3",
               "--seed", "3", "--out", str(out)])
    assert rc == 0
    return out


class TestDatasetGen:
    def test_writes_annotations_and_manifest(self, dataset):
        assert (dataset / "annotations.jsonl").exists()
        assert (dataset / "classes.txt").exists()
        manifest = json.loads((dataset / "manifest.json").read_text())
        assert manifest["command"] == "dataset-gen"
        assert manifest["arguments"]["seed"] == 7
        assert "package_version" in manifest

    def test_missing_out_is_validation_error(self):
        assert main(["dataset-gen", "--n", "5"]) == 1


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "final.ckpt").exists()
        assert (trained / "training_log.csv").exists()
        assert (trained / "loss.png").exists()
        assert (trained / "manifest.json").exists()

    def test_log_has_phase_column(self, trained):
        lines = (trained / "training_log.csv").read_text().splitlines()
        assert lines[0].split(",")[1] == "phase"
        phases = [l.split(",")[1] for l in lines[1:]]
        assert phases == ["float", "float", "qat", "qat"]


class TestExportAndInfer:
    def test_export_blob(self, workdir, trained):
        rc = main(["export", "--checkpoint", str(trained / "final.ckpt"),
                   "--out", str(workdir / "model.tylq")])
        assert rc == 0
        assert (workdir / "model.tylq").exists()

    def test_infer_on_checkpoint_and_blob(self, workdir, dataset, trained,
                                          capsys):
        img = str(dataset / "images" / "img_00000.png")
        rc = main(["infer", "--model", str(trained / "final.ckpt"),
                   "--image", img, "--threshold", "0.0"])
        assert rc == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        rec = json.loads(line)
        assert rec["image"] == img and "detections" in rec

        rc = main(["infer", "--model", str(workdir / "model.tylq"),
                   "--config", str(workdir / "smoke.cfg"),
                   "--image", img, "--threshold", "0.0"])
        assert rc == 0
        rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert "detections" in rec

    def test_blob_without_config_is_validation_error(self, workdir, dataset,
                                                     capsys):
        img = str(dataset / "images" / "img_00000.png")
        rc = main(["infer", "--model", str(workdir / "model.tylq"),
                   "--image", img])
        assert rc == 1
        assert "config" in capsys.readouterr().err

    def test_export_without_scales_fails(self, workdir, dataset, capsys):
        out = workdir / "floatrun"
        rc = main(["train", "--dataset", str(dataset), "--model",
                   str(workdir / "smoke.cfg"), "--epochs-float", "1",
                   "--epochs-qat", "0", "--batch-size", "16",
                   "--seed", "3", "--out", str(out)])
        assert rc == 0
        rc = main(["export", "--checkpoint", str(out / "final.ckpt"),
                   "--out", str(workdir / "nope.tylq")])
        assert rc == 1
        assert "quantize" in capsys.readouterr().err


class TestQuantizeCommand:
    def test_calibrate_float_checkpoint(self, workdir, dataset, capsys):
        out = workdir / "floatrun2"
        assert main(["train", "--dataset", str(dataset), "--model",
                     str(workdir / "smoke.cfg"), "--epochs-float", "1",
                     "--epochs-qat", "0", "--batch-size", "16",
                     "--seed", "4", "--out", str(out)]) == 0
        rc = main(["quantize", "--checkpoint", str(out / "final.ckpt"),
                   "--dataset", str(dataset), "--calib-samples", "16",
                   "--out", str(workdir / "calib.ckpt")])
        assert rc == 0
        rc = main(["export", "--checkpoint", str(workdir / "calib.ckpt"),
                   "--out", str(workdir / "calib.tylq")])
        assert rc == 0


class TestEval:
    def test_eval_single(self, workdir, dataset, trained, capsys):
        out = workdir / "eval1"
        rc = main(["eval", "--model", str(trained / "final.ckpt"),
                   "--dataset", str(dataset), "--out", str(out)])
        assert rc == 0
        assert "mAP@0.5" in capsys.readouterr().out
        assert (out / "report.csv").exists()
        assert (out / "report.txt").exists()
        assert (out / "manifest.json").exists()

    def test_eval_matrix(self, workdir, dataset, trained, capsys):
        out = workdir / "eval2"
        rc = main(["eval", "--model", str(trained / "final.ckpt"),
                   "--dataset", str(dataset), "--restrictions", "inf,10,5",
                   "--out", str(out)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "no restriction" in text and "max 5 obj." in text
        assert (out / "matrix.csv").exists()
        header = (out / "matrix.csv").read_text().splitlines()[0]
        assert header == "model,no_restriction,max_10,max_5"


class TestCheckDeploy:
    def test_reference_passes(self, capsys):
        rc = main(["check-deploy", "--model", REF_CFG,
                   "--profile", "max78000"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "weight memory" in out

    def test_oversized_fails(self, tmp_path, capsys):
        big = tmp_path / "big.cfg"
        big.write_text(
            "input 3 88 88\nhead 4 2 1\n"
            "conv3x3 3 256\nrelu\nconv3x3 256 256\nrelu\n"
            "maxpool2x2\nmaxpool2x2\nmaxpool2x2\nmaxpool2x2\n"
            "flatten\nfc 6400 176\n")
        rc = main(["check-deploy", "--model", str(big)])
        assert rc == 1
        assert "weight memory" in capsys.readouterr().out

    def test_bad_config_is_validation_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("input 3 88 88\nhead 4 2 1\nconv7x7 3 16\n")
        rc = main(["check-deploy", "--model", str(bad)])
        assert rc == 1
        assert "error" in capsys.readouterr().err


class TestProfile:
    def test_fixture_report_and_figure(self, workdir, capsys):
        out = workdir / "prof"
        rc = main(["profile", "--measurements", DEVICES,
                   "--macs", "29425000", "--out", str(out)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "max78000" in text
        assert (out / "metrics.csv").exists()
        assert (out / "metrics.txt").exists()
        assert (out / "devices.png").exists()
        rows = (out / "metrics.csv").read_text().splitlines()
        assert rows[0].startswith("device,")
        assert len(rows) == 5

    def test_model_macs_from_config(self, capsys):
        rc = main(["profile", "--measurements", DEVICES,
                   "--model", REF_CFG])
        assert rc == 0
        assert "MACs per inference: 101,999,616" in capsys.readouterr().out

    def test_needs_model_or_macs(self, capsys):
        rc = main(["profile", "--measurements", DEVICES])
        assert rc == 1

    def test_missing_file_is_runtime_error(self, capsys):
        rc = main(["profile", "--measurements", "/nonexistent.csv",
                   "--macs", "1000"])
        assert rc == 2


class TestUsageErrors:
    def test_unknown_flag_exits_1(self, capsys):
        assert main(["check-deploy", "--model", REF_CFG, "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand_exits_1(self):
        assert main(["frobnicate"]) == 1

    def test_help_lists_subcommands(self, capsys):
        assert main(["--help"]) == 0
        out = capsys.readouterr().out
        for sub in ("train", "eval", "infer", "quantize", "export",
                    "check-deploy", "profile", "dataset-gen"):
            assert sub in out
