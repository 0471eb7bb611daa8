"""
Ensemble inference for the lesion classification pipeline.

Runs trained models over a manifest and fuses several models' softmax outputs
by their arithmetic mean.
"""

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd

from augmentation import load_image, prepare_views
from config import DEFAULT_BATCH_SIZE, DEFAULT_THRESHOLD, POSITIVE_INDEX, PREDICTION_HEADER, SCORE_DECIMALS
from dataset import Task, TaskManifest, parse_task
from errors import ManifestParseError, PredictionMismatchError
from models import ModelState, forward_softmax

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
ENSEMBLE_SOURCE = "ensemble"


@dataclass(frozen=True)
class PredictionSet:
    """Per-image probability vectors; index 0 is the task class."""

    task: Task
    entries: Dict[str, np.ndarray] = field(default_factory=dict)
    source: str = ""

    def __post_init__(self):
        for image_id, probs in self.entries.items():
            if np.any(probs < 0) or abs(float(np.sum(probs)) - 1.0) > 1e-6:
                raise PredictionMismatchError(f"{self.source}: probabilities for {image_id} are not normalized")

    def __len__(self) -> int:
        return len(self.entries)

    def scores(self) -> Dict[str, float]:
        """Positive-class probability per image."""
        return {image_id: float(probs[POSITIVE_INDEX]) for image_id, probs in self.entries.items()}


def predict_images(model: ModelState, image_ids: Sequence[str], views: Sequence[Sequence],
                   batch_size: int = DEFAULT_BATCH_SIZE) -> Dict[str, np.ndarray]:
    """Softmax per image, averaged over that image's views."""
    flat = [(i, view) for i, image_views in enumerate(views) for view in image_views]
    outputs: List[np.ndarray] = []
    for start in range(0, len(flat), batch_size):
        chunk = flat[start:start + batch_size]
        outputs.extend(forward_softmax(model, [view for _, view in chunk]))

    sums: Dict[int, List[np.ndarray]] = {}
    for (i, _), probs in zip(flat, outputs):
        sums.setdefault(i, []).append(probs)
    return {image_ids[i]: np.mean(np.stack(sums[i]), axis=0) for i in range(len(image_ids))}


def predict_dataset(model: ModelState, manifest: TaskManifest, n_crops: int = 1,
                    batch_size: int = DEFAULT_BATCH_SIZE, source: str = "") -> PredictionSet:
    """Deterministic inference over a manifest.

    Random-crop backbones are scored on the center crop (or the mean over five
    crops when n_crops=5).
    """
    ids = [r.image_id for r in manifest]
    views = [prepare_views(load_image(r.image_path), model.spec, n_crops) for r in manifest]
    entries = predict_images(model, ids, views, batch_size)
    source = source or model.spec.architecture_id.value
    logger.info(f"Predicted {len(entries)} images with {source}")
    return PredictionSet(task=manifest.task, entries=entries, source=source)


def ensemble_mean(sets: Sequence[PredictionSet]) -> PredictionSet:
    """Componentwise arithmetic mean of the input sets' probability vectors.

    Each component is the exact rational mean rounded once to float, so the
    result does not depend on input order and never leaves the inputs' range.
    """
    if not sets:
        raise PredictionMismatchError("ensemble needs at least one prediction set")
    first = sets[0]
    for other in sets[1:]:
        if other.task != first.task:
            raise PredictionMismatchError(f"task mismatch: {first.task.value} vs {other.task.value}")
        if set(other.entries) != set(first.entries):
            raise PredictionMismatchError(f"image ids of {other.source!r} differ from {first.source!r}")
    if len(sets) == 1:
        return PredictionSet(task=first.task, entries=dict(first.entries), source=ENSEMBLE_SOURCE)

    n = len(sets)
    fused = {}
    for image_id in first.entries:
        stacked = np.stack([s.entries[image_id] for s in sets])
        fused[image_id] = np.array([
            float(sum(Fraction(float(v)) for v in stacked[:, k]) / n) for k in range(stacked.shape[1])
        ])
    return PredictionSet(task=first.task, entries=fused, source=ENSEMBLE_SOURCE)


def threshold_decision(pred: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> int:
    """1 iff the task-class probability is >= threshold."""
    return int(float(pred[POSITIVE_INDEX]) >= threshold)


def write_prediction_csv(pred: PredictionSet, path: PathLike) -> Path:
    """Writes `image_id,score` with the task-class probability to 6 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [{"image_id": k, "score": f"{v:.{SCORE_DECIMALS}f}"} for k, v in pred.scores().items()]
    pd.DataFrame(rows, columns=PREDICTION_HEADER).to_csv(path, index=False)
    return path


def read_prediction_csv(path: PathLike, task: Union[Task, str], source: str = "") -> PredictionSet:
    path = Path(path)
    frame = pd.read_csv(path, dtype={"image_id": str})
    if list(frame.columns[:2]) != PREDICTION_HEADER:
        raise ManifestParseError(f"{path}: expected header {','.join(PREDICTION_HEADER)}", line=1)
    entries = {}
    for offset, row in enumerate(frame.itertuples(index=False)):
        score = float(row.score)
        if not 0.0 <= score <= 1.0:
            raise ManifestParseError(f"{path}: score {score} outside [0, 1]", line=offset + 2)
        probs = np.zeros(2)
        probs[POSITIVE_INDEX] = score
        probs[1 - POSITIVE_INDEX] = 1.0 - score
        entries[str(row.image_id)] = probs
    return PredictionSet(task=parse_task(task), entries=entries, source=source or path.stem)
