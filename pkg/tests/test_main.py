import pytest

import main as cli
from ensemble import read_prediction_csv
from main import main
from synthetic import SYNTHETIC_EXTENSION, generate_synthetic_dataset
from utils import read_key_values


@pytest.fixture
def predictions(tmp_path):
    gt = tmp_path / "gt.csv"
    gt.write_text(
        "image_id,melanoma,seborrheic_keratosis\n"
        "a,1.0,0.0\nb,0.0,1.0\nc,0.0,0.0\nd,1.0,0.0\n"
    )
    pred = tmp_path / "pred.csv"
    pred.write_text("image_id,score\na,0.900000\nb,0.200000\nc,0.100000\nd,0.700000\n")
    return gt, pred


class TestEvaluate:
    def test_perfect_predictions(self, tmp_path, predictions, capsys):
        gt, pred = predictions
        out_dir = tmp_path / "eval"
        status = main(["evaluate", "--predictions", str(pred), "--ground-truth", str(gt),
                       "--task", "melanoma", "--output-dir", str(out_dir)])
        assert status == 0
        kv = read_key_values(out_dir / "report.kv")
        assert kv["auc"] == "1.0"
        assert kv["accuracy"] == "1.0"
        assert "AUC:         1.0000" in capsys.readouterr().out

    def test_bootstrap_interval_printed(self, tmp_path, predictions, capsys):
        gt, pred = predictions
        status = main(["evaluate", "--predictions", str(pred), "--ground-truth", str(gt), "--task", "melanoma",
                       "--output-dir", str(tmp_path / "eval"), "--bootstrap", "50"])
        assert status == 0
        assert "bootstrap interval" in capsys.readouterr().out

    def test_mismatched_ids_fail_with_marker(self, tmp_path, predictions):
        gt, _ = predictions
        pred = tmp_path / "partial.csv"
        pred.write_text("image_id,score\na,0.9\n")
        out_dir = tmp_path / "eval"
        status = main(["evaluate", "--predictions", str(pred), "--ground-truth", str(gt),
                       "--task", "melanoma", "--output-dir", str(out_dir)])
        assert status == 1
        assert "evaluate" in (out_dir / "FAILED").read_text()

    def test_rerun_after_failure_clears_marker(self, tmp_path, predictions):
        gt, pred = predictions
        out_dir = tmp_path / "eval"
        out_dir.mkdir()
        (out_dir / "FAILED").write_text("earlier failure\n")
        status = main(["evaluate", "--predictions", str(pred), "--ground-truth", str(gt),
                       "--task", "melanoma", "--output-dir", str(out_dir)])
        assert status == 0
        assert not (out_dir / "FAILED").exists()

    def test_output_collision(self, tmp_path, predictions):
        gt, pred = predictions
        args = ["evaluate", "--predictions", str(pred), "--ground-truth", str(gt),
                "--task", "melanoma", "--output-dir", str(tmp_path / "eval")]
        assert main(args) == 0
        assert main(args) == 1
        assert not (tmp_path / "eval" / "FAILED").exists()
        assert main(args + ["--overwrite"]) == 0

    def test_unexpected_error_writes_marker(self, tmp_path, predictions, monkeypatch):
        def broken(*args, **kwargs):
            raise RuntimeError("device lost")

        monkeypatch.setattr(cli, "evaluate", broken)
        gt, pred = predictions
        out_dir = tmp_path / "eval"
        status = main(["evaluate", "--predictions", str(pred), "--ground-truth", str(gt),
                       "--task", "melanoma", "--output-dir", str(out_dir)])
        assert status == 1
        assert "RuntimeError: device lost" in (out_dir / "FAILED").read_text()


def test_ensemble_of_identical_copies(tmp_path, predictions):
    _, pred = predictions
    out = tmp_path / "fused.csv"
    status = main(["ensemble", str(pred), str(pred), str(pred), "--task", "melanoma", "--output", str(out)])
    assert status == 0
    assert out.read_text() == pred.read_text()
    assert read_prediction_csv(out, "melanoma").scores()["d"] == 0.7


def test_split_command(tmp_path):
    csv_path = generate_synthetic_dataset(tmp_path / "data", n_images=30, image_size=16, seed=0)
    out_dir = tmp_path / "split"
    status = main(["split", "--ground-truth", str(csv_path), "--image-root", str(tmp_path / "data" / "images"),
                   "--extension", SYNTHETIC_EXTENSION, "--output-dir", str(out_dir)])
    assert status == 0
    meta = read_key_values(out_dir / "split.meta")
    assert (meta["val_Melanoma"], meta["val_SeborrheicKeratosis"], meta["val_Nevus"]) == ("2", "1", "3")


class TestConfigCommands:
    def test_init_config_then_refuse(self, tmp_path):
        cfg = tmp_path / "sk.cfg"
        assert main(["init-config", "--task", "sk", "--output", str(cfg), "--surrogate"]) == 0
        text = cfg.read_text()
        assert "models = sk_alexnet350" in text
        assert "surrogate = true" in text
        assert main(["init-config", "--task", "sk", "--output", str(cfg)]) == 1

    def test_runs_empty(self, capsys):
        assert main(["runs"]) == 0
        assert "No runs registered." in capsys.readouterr().out


def test_reproduce_melanoma_surrogate(tmp_path, isolated_output_root, capsys):
    out_dir = tmp_path / "mel"
    status = main(["reproduce-paper", "--task", "melanoma", "--surrogate", "--output-dir", str(out_dir)])
    assert status == 0
    kv = read_key_values(out_dir / "report" / "report.kv")
    assert kv["source"] == "ensemble"
    assert float(kv["auc"]) >= 0.95
    assert (out_dir / "predictions" / "ensemble.csv").is_file()
    for name in ("mel_googlenet256", "mel_googlenet224", "mel_alexnet224"):
        assert (out_dir / "predictions" / f"{name}.csv").is_file()
        assert (out_dir / "report" / name / "report.txt").is_file()

    assert main(["runs", "--task", "melanoma"]) == 0
    listing = capsys.readouterr().out
    assert all(name in listing for name in ("mel_googlenet256", "mel_googlenet224", "mel_alexnet224"))
    assert (isolated_output_root / "runs.db").is_file()
