import numpy as np
import pandas as pd
import pytest

import report_generator
from dataset import Task
from ensemble import PredictionSet
from metrics import evaluate
from report_generator import format_report_text, plot_roc, plot_training_curves, write_report
from training import EpochMetrics
from utils import read_key_values


def _report(scores, labels):
    pred = PredictionSet(Task.MELANOMA, {k: np.array([v, 1.0 - v]) for k, v in scores.items()}, source="demo")
    return evaluate(pred, labels)


@pytest.fixture
def two_class_report():
    return _report({"a": 0.9, "b": 0.8, "c": 0.4, "d": 0.3}, {"a": 1, "b": 0, "c": 1, "d": 0})


class TestWriteReport:
    def test_files_and_values(self, tmp_path, two_class_report):
        written = write_report(two_class_report, tmp_path / "report", plots=False)
        assert set(written) == {"text", "kv", "roc"}
        kv = read_key_values(written["kv"])
        assert kv["auc"] == "0.75"
        assert (kv["tp"], kv["fp"], kv["tn"], kv["fn"]) == ("1", "1", "1", "1")
        assert kv["class_accuracy.positive"] == "0.5"
        assert kv["source"] == "demo"

    def test_roc_table(self, tmp_path, two_class_report):
        written = write_report(two_class_report, tmp_path, plots=False)
        frame = pd.read_csv(written["roc"], dtype=str)
        assert list(frame.columns) == ["threshold", "fpr", "tpr"]
        assert frame["threshold"].iloc[0] == "inf"
        assert len(frame) == 5
        assert (float(frame["fpr"].iloc[-1]), float(frame["tpr"].iloc[-1])) == (1.0, 1.0)

    def test_single_class_has_no_roc(self, tmp_path):
        report = _report({"a": 0.9, "b": 0.1}, {"a": 0, "b": 0})
        written = write_report(report, tmp_path)
        assert "roc" not in written
        assert read_key_values(written["kv"])["auc"] == ""
        assert "AUC:         n/a" in written["text"].read_text()

    @pytest.mark.skipif(not report_generator.MATPLOTLIB_AVAILABLE, reason="matplotlib not installed")
    def test_roc_png(self, tmp_path, two_class_report):
        written = write_report(two_class_report, tmp_path)
        assert written["roc_png"].stat().st_size > 0


def test_text_summary(two_class_report):
    text = format_report_text(two_class_report)
    assert "Evaluation of demo (melanoma)" in text
    assert "Accuracy:    0.5000" in text
    assert "AUC:         0.7500" in text


@pytest.mark.skipif(not report_generator.MATPLOTLIB_AVAILABLE, reason="matplotlib not installed")
def test_training_curves_handle_missing_auc(tmp_path):
    metrics = [EpochMetrics(0, 0.7, 0.5, None), EpochMetrics(1, 0.6, 0.6, 0.7)]
    path = plot_training_curves(metrics, tmp_path / "curves.png", title="run")
    assert path.is_file()
    assert plot_training_curves([], tmp_path / "none.png") is None


@pytest.mark.skipif(not report_generator.MATPLOTLIB_AVAILABLE, reason="matplotlib not installed")
def test_roc_overlay_skips_single_class_reports(tmp_path, two_class_report):
    single = _report({"a": 0.9, "b": 0.1}, {"a": 0, "b": 0})
    assert plot_roc([two_class_report, single], tmp_path / "overlay.png") == tmp_path / "overlay.png"
    assert plot_roc([single], tmp_path / "none.png") is None
    assert not (tmp_path / "none.png").exists()
