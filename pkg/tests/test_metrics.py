import math
from fractions import Fraction

import numpy as np
import pytest

from dataset import Task
from ensemble import PredictionSet
from errors import MetricError
from metrics import (
    ConfusionMatrix,
    accuracy,
    auc_pair_oracle,
    auc_trapezoid,
    bootstrap_auc_interval,
    confusion_at_threshold,
    evaluate,
    per_class_accuracy,
    roc_curve,
    sensitivity,
    specificity,
)


def _pred_set(scores, task=Task.MELANOMA):
    return PredictionSet(task, {k: np.array([v, 1.0 - v]) for k, v in scores.items()}, source="fixture")


class TestAuc:
    def test_small_example(self):
        scores, labels = [0.9, 0.8, 0.4, 0.3], [1, 0, 1, 0]
        assert auc_trapezoid(roc_curve(scores, labels)) == pytest.approx(0.75, abs=1e-12)
        assert auc_pair_oracle(scores, labels) == 0.75

    def test_perfect_and_inverted(self):
        assert auc_trapezoid(roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == 1.0
        assert auc_trapezoid(roc_curve([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])) == 0.0

    def test_all_tied_scores_give_half(self):
        assert auc_trapezoid(roc_curve([0.5] * 6, [1, 0, 1, 0, 0, 1])) == pytest.approx(0.5, abs=1e-12)

    def test_trapezoid_matches_pair_count_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 60))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            # coarse grid so ties are common
            scores = rng.integers(0, 10, size=n) / 10.0
            curve = roc_curve(scores, labels)
            assert abs(auc_trapezoid(curve) - auc_pair_oracle(scores, labels)) <= 1e-9

    @pytest.mark.parametrize("n", [2, 60, 2000])
    @pytest.mark.parametrize("positive_share", [0.5, 0.2, 1 / 51])
    def test_trapezoid_matches_pair_count_across_sizes(self, n, positive_share):
        rng = np.random.default_rng(n)
        n_pos = min(n - 1, max(1, round(n * positive_share)))
        labels = np.array([1] * n_pos + [0] * (n - n_pos))
        rng.shuffle(labels)
        for scores in (rng.random(n), rng.integers(0, 20, size=n) / 20.0):
            curve = roc_curve(scores, labels)
            assert abs(auc_trapezoid(curve) - auc_pair_oracle(scores, labels)) <= 1e-9

    def test_matches_sklearn(self):
        sk_metrics = pytest.importorskip("sklearn.metrics")
        rng = np.random.default_rng(1)
        for _ in range(50):
            labels = rng.integers(0, 2, size=80)
            labels[:2] = [0, 1]
            scores = np.round(rng.random(80), 2)
            ours = auc_trapezoid(roc_curve(scores, labels))
            assert ours == pytest.approx(sk_metrics.roc_auc_score(labels, scores), abs=1e-9)

    def test_complement_symmetry(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        scores = rng.random(40)
        flipped = auc_trapezoid(roc_curve(1.0 - scores, 1 - labels))
        assert flipped == pytest.approx(auc_trapezoid(roc_curve(scores, labels)), abs=1e-9)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        scores = rng.random(40)
        base = auc_pair_oracle(scores, labels)
        assert auc_pair_oracle(scores ** 3, labels) == base
        assert auc_pair_oracle(np.exp(scores), labels) == base

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            roc_curve([0.1, 0.2], [1, 1])
        with pytest.raises(MetricError):
            auc_pair_oracle([0.1, 0.2], [0, 0])


class TestRocCurve:
    def test_endpoints_and_monotonicity(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 2, size=30)
        labels[:2] = [0, 1]
        curve = roc_curve(rng.random(30), labels)
        assert curve.points[0] == (0.0, 0.0)
        assert curve.points[-1] == (1.0, 1.0)
        assert np.all(np.diff(curve.fpr) >= 0)
        assert np.all(np.diff(curve.tpr) >= 0)
        np.testing.assert_array_equal(curve.fpr[[0, -1]], [0.0, 1.0])
        assert math.isinf(curve.thresholds[0])
        assert list(curve.thresholds[1:]) == sorted(curve.thresholds[1:], reverse=True)

    def test_ties_share_one_point(self):
        curve = roc_curve([0.7, 0.7, 0.2], [1, 0, 0])
        assert curve.points == ((0.0, 0.0), (0.5, 1.0), (1.0, 1.0))
        assert curve.thresholds[1:] == (0.7, 0.2)


# (scores, labels, threshold, expected tp, fp, tn, fn)
CONFUSION_CASES = [
    ([0.9, 0.1], [1, 0], 0.5, (1, 0, 1, 0)),
    ([0.9, 0.1], [0, 1], 0.5, (0, 1, 0, 1)),
    ([0.5, 0.5], [1, 0], 0.5, (1, 1, 0, 0)),
    ([0.49, 0.51], [1, 0], 0.5, (0, 1, 0, 1)),
    ([0.2, 0.3, 0.4], [0, 0, 0], 0.5, (0, 0, 3, 0)),
    ([0.6, 0.7, 0.8], [1, 1, 1], 0.5, (3, 0, 0, 0)),
    ([0.6, 0.7, 0.8], [1, 1, 1], 0.9, (0, 0, 0, 3)),
    ([0.0, 1.0, 0.5, 0.25], [0, 1, 1, 0], 0.25, (2, 1, 1, 0)),
    ([0.1, 0.2, 0.3, 0.4, 0.6], [1, 0, 1, 0, 1], 0.3, (2, 1, 1, 1)),
    ([0.95, 0.85, 0.75, 0.05], [1, 1, 0, 0], 0.8, (2, 0, 2, 0)),
    ([0.3], [1], 0.0, (1, 0, 0, 0)),
]


class TestConfusion:
    @pytest.mark.parametrize("scores,labels,threshold,expected", CONFUSION_CASES)
    def test_counts_and_rates(self, scores, labels, threshold, expected):
        cm = confusion_at_threshold(scores, labels, threshold)
        assert (cm.tp, cm.fp, cm.tn, cm.fn) == expected
        tp, fp, tn, fn = expected
        assert accuracy(cm) == Fraction(tp + tn, tp + fp + tn + fn)
        assert sensitivity(cm) == (Fraction(tp, tp + fn) if tp + fn else None)
        assert specificity(cm) == (Fraction(tn, tn + fp) if tn + fp else None)
        assert per_class_accuracy(cm) == {"positive": sensitivity(cm), "negative": specificity(cm)}

    def test_empty_matrix(self):
        cm = ConfusionMatrix()
        assert accuracy(cm) is None
        assert sensitivity(cm) is None
        assert specificity(cm) is None

    def test_mapping_alignment(self):
        cm = confusion_at_threshold({"b": 0.9, "a": 0.1}, {"a": 1, "b": 0})
        assert (cm.tp, cm.fp, cm.tn, cm.fn) == (0, 1, 0, 1)

    def test_mapping_key_mismatch(self):
        with pytest.raises(MetricError):
            confusion_at_threshold({"a": 0.1}, {"b": 1})

    def test_bad_labels(self):
        with pytest.raises(MetricError):
            confusion_at_threshold([0.1, 0.2], [0, 2])


class TestEvaluate:
    def test_full_report(self):
        pred = _pred_set({"a": 0.9, "b": 0.8, "c": 0.4, "d": 0.3})
        report = evaluate(pred, {"a": 1, "b": 0, "c": 1, "d": 0})
        assert report.auc == pytest.approx(0.75, abs=1e-12)
        assert report.accuracy == 0.5
        assert report.sensitivity == 0.5
        assert report.specificity == 0.5
        assert report.n_images == 4
        assert report.task == "melanoma"
        assert report.roc is not None

    def test_single_class_has_no_auc(self):
        report = evaluate(_pred_set({"a": 0.9, "b": 0.2}), {"a": 0, "b": 0})
        assert report.auc is None
        assert report.roc is None
        assert report.sensitivity is None
        assert report.specificity == 0.5

    def test_id_mismatch(self):
        with pytest.raises(MetricError):
            evaluate(_pred_set({"a": 0.9}), {"a": 1, "b": 0})


class TestBootstrap:
    def test_interval_brackets_point_estimate(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 2, size=60)
        labels[:2] = [0, 1]
        scores = np.clip(labels * 0.3 + rng.random(60) * 0.7, 0, 1)
        low, high = bootstrap_auc_interval(scores, labels, n_resamples=200, seed=1)
        point = auc_pair_oracle(scores, labels)
        assert 0.0 <= low <= point <= high <= 1.0

    def test_seeded(self):
        scores, labels = [0.9, 0.8, 0.4, 0.3, 0.6, 0.2], [1, 0, 1, 0, 1, 0]
        a = bootstrap_auc_interval(scores, labels, n_resamples=100, seed=3)
        b = bootstrap_auc_interval(scores, labels, n_resamples=100, seed=3)
        assert a == b
