"""
Evaluation metrics for the lesion classification pipeline.

Accuracy, per-class accuracy, sensitivity and specificity come from a
confusion matrix in exact rational arithmetic. ROC curves group tied scores at
one threshold; the trapezoidal AUC is cross-checked against an independent
Mann-Whitney pair count on every evaluation.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import AUC_AGREEMENT_TOLERANCE, DEFAULT_THRESHOLD
from errors import MetricError

logger = logging.getLogger(__name__)

Scores = Union[Mapping[str, float], Sequence[float], np.ndarray]
Labels = Union[Mapping[str, int], Sequence[int], np.ndarray]


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RocCurve:
    points: Tuple[Tuple[float, float], ...]
    thresholds: Tuple[float, ...]

    @property
    def fpr(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


@dataclass(frozen=True)
class EvalReport:
    task: str
    n_images: int
    threshold: float
    confusion: ConfusionMatrix
    accuracy: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    per_class_accuracy: Dict[str, Optional[float]] = field(default_factory=dict)
    auc: Optional[float] = None
    roc: Optional[RocCurve] = None
    source: str = ""


def _aligned(scores: Scores, labels: Labels) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (scores, labels) arrays; mappings are aligned on their keys."""
    if isinstance(scores, Mapping) or isinstance(labels, Mapping):
        if not (isinstance(scores, Mapping) and isinstance(labels, Mapping)):
            raise MetricError("scores and labels must both be mappings or both be sequences")
        if set(scores) != set(labels):
            only_scores = sorted(set(scores) - set(labels))[:3]
            only_labels = sorted(set(labels) - set(scores))[:3]
            raise MetricError(f"score/label key mismatch (only scored: {only_scores}, only labeled: {only_labels})")
        keys = sorted(scores)
        s = np.array([float(scores[k]) for k in keys], dtype=np.float64)
        y = np.array([int(labels[k]) for k in keys], dtype=np.int64)
    else:
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        if s.shape != y.shape:
            raise MetricError(f"{s.size} scores but {y.size} labels")
    if y.size and not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    return s, y


def confusion_at_threshold(scores: Scores, labels: Labels, threshold: float = DEFAULT_THRESHOLD) -> ConfusionMatrix:
    """Counts decisions under the rule: positive iff score >= threshold."""
    s, y = _aligned(scores, labels)
    predicted = s >= threshold
    actual = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(predicted & actual)),
        fp=int(np.sum(predicted & ~actual)),
        tn=int(np.sum(~predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
    )


def _ratio(numerator: int, denominator: int) -> Optional[Fraction]:
    if denominator == 0:
        return None
    return Fraction(numerator, denominator)


def sensitivity(cm: ConfusionMatrix) -> Optional[Fraction]:
    """tp / (tp + fn); None when there are no positives."""
    return _ratio(cm.tp, cm.tp + cm.fn)


def specificity(cm: ConfusionMatrix) -> Optional[Fraction]:
    """tn / (tn + fp); None when there are no negatives."""
    return _ratio(cm.tn, cm.tn + cm.fp)


def accuracy(cm: ConfusionMatrix) -> Optional[Fraction]:
    return _ratio(cm.tp + cm.tn, cm.total)


def per_class_accuracy(cm: ConfusionMatrix) -> Dict[str, Optional[Fraction]]:
    """Recall of each class at the decision threshold."""
    return {"positive": sensitivity(cm), "negative": specificity(cm)}


def _as_float(value: Optional[Fraction]) -> Optional[float]:
    return None if value is None else float(value)


def _require_both_classes(y: np.ndarray) -> Tuple[int, int]:
    n_pos = int(np.sum(y == 1))
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"need at least one positive and one negative label (got {n_pos} / {n_neg})")
    return n_pos, n_neg


def roc_curve(scores: Scores, labels: Labels) -> RocCurve:
    """ROC points from (0, 0) to (1, 1), one per distinct score, descending.

    The leading threshold is +inf (nothing predicted positive); tied scores move
    together at a single threshold.
    """
    s, y = _aligned(scores, labels)
    n_pos, n_neg = _require_both_classes(y)

    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tps = np.cumsum(y_sorted == 1)
    fps = np.cumsum(y_sorted == 0)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.diff(s_sorted) != 0)
    ends = np.append(ends, s_sorted.size - 1)

    points = [(0.0, 0.0)]
    thresholds = [math.inf]
    for end in ends:
        points.append((int(fps[end]) / n_neg, int(tps[end]) / n_pos))
        thresholds.append(float(s_sorted[end]))
    return RocCurve(points=tuple(points), thresholds=tuple(thresholds))


def auc_trapezoid(curve: RocCurve) -> float:
    """Trapezoidal area under the curve over FPR in [0, 1]."""
    pts = curve.points
    area = math.fsum((x1 - x0) * (y1 + y0) / 2.0 for (x0, y0), (x1, y1) in zip(pts, pts[1:]))
    return min(1.0, max(0.0, area))


def auc_pair_oracle(scores: Scores, labels: Labels) -> float:
    """Brute-force Mann-Whitney AUC: ordered pairs count 1, ties count 1/2."""
    s, y = _aligned(scores, labels)
    n_pos, n_neg = _require_both_classes(y)
    pos = s[y == 1]
    neg = s[y == 0]
    greater = 0
    ties = 0
    # chunked so the pair matrix stays small for large inputs
    for start in range(0, pos.size, 1024):
        block = pos[start:start + 1024, None]
        greater += int(np.sum(block > neg[None, :]))
        ties += int(np.sum(block == neg[None, :]))
    return (2 * greater + ties) / (2 * n_pos * n_neg)


def bootstrap_auc_interval(scores: Scores, labels: Labels, n_resamples: int = 1000,
                           confidence: float = 0.95, seed: int = 0) -> Optional[Tuple[float, float]]:
    """Percentile bootstrap interval for the AUC; single-class resamples are skipped."""
    s, y = _aligned(scores, labels)
    _require_both_classes(y)
    rng = np.random.default_rng(seed)
    values: List[float] = []
    for _ in range(n_resamples):
        idx = rng.integers(0, s.size, size=s.size)
        ys = y[idx]
        if ys.min() == ys.max():
            continue
        values.append(auc_pair_oracle(s[idx], ys))
    if not values:
        return None
    alpha = (1.0 - confidence) / 2.0
    low, high = np.quantile(values, [alpha, 1.0 - alpha])
    return float(low), float(high)


def evaluate(pred, labels: Mapping[str, int], threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    """Assembles every reported metric for one prediction set.

    AUC is computed from the ROC curve and from the pair count; disagreement
    beyond 1e-9 is an internal error. Single-class label sets get AUC None.
    """
    scores = pred.scores()
    if set(scores) != set(labels):
        raise MetricError(
            f"prediction set {pred.source!r} covers {len(scores)} images, labels cover {len(labels)}; ids differ"
        )
    cm = confusion_at_threshold(scores, labels, threshold)

    roc = None
    auc = None
    n_pos = sum(int(v) for v in labels.values())
    if 0 < n_pos < len(labels):
        roc = roc_curve(scores, labels)
        auc = auc_trapezoid(roc)
        oracle = auc_pair_oracle(scores, labels)
        if abs(auc - oracle) > AUC_AGREEMENT_TOLERANCE:
            raise MetricError(f"internal error: trapezoid AUC {auc!r} disagrees with pair count {oracle!r}")
    else:
        logger.warning(f"Labels for {pred.source!r} hold a single class; AUC is not applicable")

    return EvalReport(
        task=pred.task.value if hasattr(pred.task, "value") else str(pred.task),
        n_images=cm.total,
        threshold=threshold,
        confusion=cm,
        accuracy=_as_float(accuracy(cm)),
        sensitivity=_as_float(sensitivity(cm)),
        specificity=_as_float(specificity(cm)),
        per_class_accuracy={k: _as_float(v) for k, v in per_class_accuracy(cm).items()},
        auc=auc,
        roc=roc,
        source=pred.source,
    )
