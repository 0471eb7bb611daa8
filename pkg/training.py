"""
Training harness for the lesion classification pipeline.

This module encodes the staged learning-rate schedules, runs the epoch loop
with per-epoch validation and checkpointing, and selects the best epoch.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from augmentation import load_image, prepare_for_model, random_crop, resize_preserve_aspect
from config import (
    CHECKPOINT_DIR,
    CONFIG_SNAPSHOT,
    DEFAULT_BATCH_SIZE,
    DEFAULT_MOMENTUM,
    DEFAULT_SELECTION_CRITERION,
    DEFAULT_THRESHOLD,
    DEFAULT_WEIGHT_DECAY,
    METRICS_CSV,
    METRICS_HEADER,
    SELECTION_CRITERIA,
)
from dataset import Task, TaskManifest, parse_task
from ensemble import PredictionSet, predict_images
from errors import ManifestValidationError, MetricError, NonFiniteLossError, ScheduleError
from metrics import evaluate
from models import BackboneSpec, ModelState, build_model, save_checkpoint, sgd_step
from utils import derive_seed, read_key_values, write_key_values

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ScheduleId(str, Enum):
    SK_ALEXNET350 = "SK_AlexNet350"
    MEL_GOOGLENET256 = "Mel_GoogleNet256"
    MEL_GOOGLENET224 = "Mel_GoogleNet224"
    MEL_ALEXNET224 = "Mel_AlexNet224"


# schedule id -> (total epochs, learning rates of equal-length stages)
PAPER_SCHEDULES: Dict[ScheduleId, Tuple[int, Tuple[float, ...]]] = {
    ScheduleId.SK_ALEXNET350: (30, (0.001, 0.0001, 0.00001)),
    ScheduleId.MEL_GOOGLENET256: (72, (0.001, 0.0001, 0.00001)),
    ScheduleId.MEL_GOOGLENET224: (50, (0.005, 0.0025, 0.00125, 0.000625, 0.0003125)),
    ScheduleId.MEL_ALEXNET224: (30, (0.001, 0.0001, 0.00001)),
}


@dataclass(frozen=True)
class Stage:
    start: int  # inclusive
    end: int  # exclusive
    learning_rate: float


@dataclass(frozen=True)
class TrainingSchedule:
    total_epochs: int
    stages: Tuple[Stage, ...]
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    batch_size: int = DEFAULT_BATCH_SIZE
    schedule_id: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.total_epochs < 1:
            raise ScheduleError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not self.stages:
            raise ScheduleError("a schedule needs at least one stage")
        if self.batch_size < 1:
            raise ScheduleError(f"batch_size must be >= 1, got {self.batch_size}")
        expected_start = 0
        previous_lr = math.inf
        for stage in self.stages:
            if stage.start != expected_start or stage.end <= stage.start:
                raise ScheduleError(f"stages must tile [0, {self.total_epochs}) without gaps or overlaps")
            if stage.learning_rate < 0:
                raise ScheduleError(f"negative learning rate {stage.learning_rate}")
            if stage.learning_rate >= previous_lr:
                raise ScheduleError("learning rates must strictly decrease across stages")
            expected_start = stage.end
            previous_lr = stage.learning_rate
        if expected_start != self.total_epochs:
            raise ScheduleError(f"stages end at {expected_start}, schedule has {self.total_epochs} epochs")


def equal_stages(total_epochs: int, learning_rates: Sequence[float]) -> Tuple[Stage, ...]:
    k = len(learning_rates)
    bounds = [i * total_epochs // k for i in range(k + 1)]
    return tuple(Stage(bounds[i], bounds[i + 1], lr) for i, lr in enumerate(learning_rates))


def make_paper_schedule(config_id: Union[ScheduleId, str], momentum: float = DEFAULT_MOMENTUM,
                        weight_decay: float = DEFAULT_WEIGHT_DECAY,
                        batch_size: int = DEFAULT_BATCH_SIZE) -> TrainingSchedule:
    try:
        schedule_id = ScheduleId(config_id)
    except ValueError as e:
        raise ScheduleError(f"unknown schedule config {config_id!r}") from e
    total, rates = PAPER_SCHEDULES[schedule_id]
    return TrainingSchedule(
        total_epochs=total,
        stages=equal_stages(total, rates),
        momentum=momentum,
        weight_decay=weight_decay,
        batch_size=batch_size,
        schedule_id=schedule_id.value,
    )


def lr_at_epoch(schedule: TrainingSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ScheduleError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    for stage in schedule.stages:
        if stage.start <= epoch < stage.end:
            return stage.learning_rate
    raise ScheduleError(f"no stage covers epoch {epoch}")  # unreachable for validated schedules


def compress_schedule(schedule: TrainingSchedule, total_epochs: int) -> TrainingSchedule:
    """Same learning-rate sequence over fewer (or more) epochs, boundaries scaled proportionally."""
    k = len(schedule.stages)
    if total_epochs < k:
        raise ScheduleError(f"{total_epochs} epochs cannot hold {k} stages")
    starts: List[int] = []
    for i, stage in enumerate(schedule.stages):
        start = 0 if i == 0 else round(stage.start * total_epochs / schedule.total_epochs)
        if starts:
            start = max(start, starts[-1] + 1)
        starts.append(min(start, total_epochs - (k - i)))
    ends = starts[1:] + [total_epochs]
    stages = tuple(Stage(s, e, st.learning_rate) for s, e, st in zip(starts, ends, schedule.stages))
    return replace(schedule, total_epochs=total_epochs, stages=stages)


def scale_learning_rates(schedule: TrainingSchedule, factor: float) -> TrainingSchedule:
    stages = tuple(replace(stage, learning_rate=stage.learning_rate * factor) for stage in schedule.stages)
    return replace(schedule, stages=stages)


def format_stages(stages: Sequence[Stage]) -> str:
    return ",".join(f"{s.start}:{s.end}:{s.learning_rate!r}" for s in stages)


def parse_stages(text: str) -> Tuple[Stage, ...]:
    stages = []
    for chunk in text.split(","):
        start, end, lr = chunk.split(":")
        stages.append(Stage(int(start), int(end), float(lr)))
    return tuple(stages)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_auc: Optional[float]


@dataclass
class RunRecord:
    run_id: str
    task: Task
    spec: BackboneSpec
    schedule: TrainingSchedule
    seed: int
    metrics: List[EpochMetrics] = field(default_factory=list)
    selected_epoch: Optional[int] = None
    criterion: str = DEFAULT_SELECTION_CRITERION
    checkpoint_paths: Dict[int, Path] = field(default_factory=dict)
    run_dir: Optional[Path] = None

    @property
    def best_checkpoint(self) -> Optional[Path]:
        if self.selected_epoch is None:
            return None
        return self.checkpoint_paths.get(self.selected_epoch)


@dataclass(frozen=True)
class RunSnapshot:
    """Everything besides the data needed to replay a run."""

    run_id: str
    task: Task
    spec: BackboneSpec
    schedule: TrainingSchedule
    seed: int
    criterion: str
    threshold: float


def select_best_checkpoint(record: Union[RunRecord, Sequence[EpochMetrics]],
                           criterion: str = DEFAULT_SELECTION_CRITERION) -> int:
    """Epoch maximizing the criterion; ties go to the earliest epoch."""
    if criterion not in SELECTION_CRITERIA:
        raise MetricError(f"unknown selection criterion {criterion!r}")
    metrics = record.metrics if isinstance(record, RunRecord) else list(record)
    if not metrics:
        raise MetricError("no epochs to select from")

    def value(m: EpochMetrics) -> float:
        v = getattr(m, criterion)
        return -math.inf if v is None or math.isnan(v) else v

    best = metrics[0]
    for m in metrics[1:]:
        if value(m) > value(best):
            best = m
    return best.epoch


def _format_optional(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_metrics_csv(metrics: Sequence[EpochMetrics], path: PathLike) -> Path:
    path = Path(path)
    rows = [
        {
            "epoch": m.epoch,
            "train_loss": repr(float(m.train_loss)),
            "val_accuracy": repr(float(m.val_accuracy)),
            "val_auc": _format_optional(m.val_auc),
        }
        for m in metrics
    ]
    pd.DataFrame(rows, columns=METRICS_HEADER).to_csv(path, index=False)
    return path


def read_metrics_csv(path: PathLike) -> List[EpochMetrics]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    return [
        EpochMetrics(
            epoch=int(row.epoch),
            train_loss=float(row.train_loss),
            val_accuracy=float(row.val_accuracy),
            val_auc=float(row.val_auc) if row.val_auc else None,
        )
        for row in frame.itertuples(index=False)
    ]


def write_run_snapshot(path: PathLike, snapshot: RunSnapshot) -> Path:
    spec = snapshot.spec
    schedule = snapshot.schedule
    items = [
        ("run_id", snapshot.run_id),
        ("task", snapshot.task.value),
        ("seed", snapshot.seed),
        ("criterion", snapshot.criterion),
        ("threshold", repr(snapshot.threshold)),
        ("spec.architecture_id", spec.architecture_id.value),
        ("spec.input_size", spec.input_size),
        ("spec.num_classes", spec.num_classes),
        ("spec.pretrained_ref", spec.pretrained_ref),
        ("spec.random_crop_from", spec.random_crop_from),
        ("spec.fine_tune_scope", spec.fine_tune_scope),
        ("schedule.id", schedule.schedule_id),
        ("schedule.total_epochs", schedule.total_epochs),
        ("schedule.stages", format_stages(schedule.stages)),
        ("schedule.momentum", repr(schedule.momentum)),
        ("schedule.weight_decay", repr(schedule.weight_decay)),
        ("schedule.batch_size", schedule.batch_size),
    ]
    return write_key_values(path, items)


def read_run_snapshot(path: PathLike) -> RunSnapshot:
    values = read_key_values(path)
    try:
        spec = BackboneSpec.from_dict({
            key[len("spec."):]: value for key, value in values.items() if key.startswith("spec.")
        })
        schedule = TrainingSchedule(
            total_epochs=int(values["schedule.total_epochs"]),
            stages=parse_stages(values["schedule.stages"]),
            momentum=float(values["schedule.momentum"]),
            weight_decay=float(values["schedule.weight_decay"]),
            batch_size=int(values["schedule.batch_size"]),
            schedule_id=values["schedule.id"],
        )
        return RunSnapshot(
            run_id=values["run_id"],
            task=parse_task(values["task"]),
            spec=spec,
            schedule=schedule,
            seed=int(values["seed"]),
            criterion=values["criterion"],
            threshold=float(values["threshold"]),
        )
    except (KeyError, ValueError) as e:
        raise ScheduleError(f"malformed run snapshot {path}: {e}") from e


def _load_images(manifest: TaskManifest, transform, workers: int) -> list:
    def work(record):
        return transform(load_image(record.image_path))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, manifest.records))
    return [work(r) for r in manifest.records]


def train(spec: BackboneSpec, schedule: TrainingSchedule, train_set: TaskManifest, val_set: TaskManifest,
          seed: int, run_dir: Optional[PathLike] = None, run_id: str = "",
          criterion: str = DEFAULT_SELECTION_CRITERION, threshold: float = DEFAULT_THRESHOLD,
          workers: int = 1) -> RunRecord:
    """Runs every epoch of the schedule, validating and checkpointing after each.

    Batch order, random crops and weight init all come from streams derived
    from `seed`, so two runs with the same inputs produce the same record.
    Images are loaded once at the backbone's load size and cropped per batch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ManifestValidationError("train and validation sets must be non-empty")
    if train_set.task != val_set.task:
        raise ManifestValidationError("train and validation sets belong to different tasks")
    run_id = run_id or f"{spec.architecture_id.value}_{seed}"
    record = RunRecord(run_id=run_id, task=train_set.task, spec=spec, schedule=schedule, seed=seed,
                       criterion=criterion)

    checkpoint_dir = None
    if run_dir is not None:
        record.run_dir = Path(run_dir)
        checkpoint_dir = record.run_dir / CHECKPOINT_DIR
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        write_run_snapshot(
            record.run_dir / CONFIG_SNAPSHOT,
            RunSnapshot(run_id, train_set.task, spec, schedule, seed, criterion, threshold),
        )

    logger.info(
        f"[TRAIN] {run_id}: {spec.architecture_id.value}@{spec.input_size}, {schedule.total_epochs} epochs, "
        f"{len(train_set)} train / {len(val_set)} val images"
    )
    train_images = _load_images(train_set, lambda img: resize_preserve_aspect(img, spec.load_size), workers)
    val_views = [[v] for v in _load_images(val_set, lambda img: prepare_for_model(img, spec), workers)]
    train_ids = [r.image_id for r in train_set]
    train_labels = [r.label for r in train_set]
    val_ids = [r.image_id for r in val_set]
    val_labels = val_set.labels()

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "torch"))
        model = build_model(spec, init_seed=derive_seed(seed, "init"))
        order_rng = np.random.default_rng(derive_seed(seed, "order"))
        crop_rng = np.random.default_rng(derive_seed(seed, "crop"))

        for epoch in range(schedule.total_epochs):
            lr = lr_at_epoch(schedule, epoch)
            order = order_rng.permutation(len(train_images))
            weighted_loss = 0.0
            for start in range(0, len(order), schedule.batch_size):
                idx = order[start:start + schedule.batch_size]
                batch = [train_images[i] for i in idx]
                if spec.random_crop_from:
                    batch = [random_crop(img, crop_rng, spec.input_size) for img in batch]
                try:
                    _, loss = sgd_step(
                        model, batch, [train_labels[i] for i in idx], lr,
                        momentum=schedule.momentum, weight_decay=schedule.weight_decay,
                        batch_ids=[train_ids[i] for i in idx],
                    )
                except NonFiniteLossError as e:
                    error = e.at_epoch(epoch)
                    logger.error(f"[TRAIN] {run_id} aborted: {error}")
                    if record.run_dir is not None:
                        write_metrics_csv(record.metrics, record.run_dir / METRICS_CSV)
                    raise error from e
                weighted_loss += loss * len(idx)
                logger.debug(f"[TRAIN] {run_id} epoch {epoch} batch {start // schedule.batch_size} loss={loss:.6f}")

            model.epoch = epoch
            model.rng_state = torch.get_rng_state()
            entries = predict_images(model, val_ids, val_views, schedule.batch_size)
            report = evaluate(PredictionSet(val_set.task, entries, source=run_id), val_labels, threshold)
            metrics = EpochMetrics(epoch, weighted_loss / len(order), report.accuracy, report.auc)
            record.metrics.append(metrics)

            if checkpoint_dir is not None:
                path = save_checkpoint(model, checkpoint_dir / f"epoch_{epoch}.ckpt")
                record.checkpoint_paths[epoch] = path
                write_metrics_csv(record.metrics, record.run_dir / METRICS_CSV)
            auc_text = "n/a" if metrics.val_auc is None else f"{metrics.val_auc:.4f}"
            logger.info(
                f"[TRAIN] {run_id} epoch {epoch + 1}/{schedule.total_epochs} lr={lr:g} "
                f"loss={metrics.train_loss:.4f} val_acc={metrics.val_accuracy:.4f} val_auc={auc_text}"
            )

    record.selected_epoch = select_best_checkpoint(record, criterion)
    logger.info(f"[TRAIN] {run_id} selected epoch {record.selected_epoch} by {criterion}")
    return record


def load_run_record(run_dir: PathLike) -> RunRecord:
    """Rebuilds a RunRecord from a finished run directory."""
    run_dir = Path(run_dir)
    snapshot = read_run_snapshot(run_dir / CONFIG_SNAPSHOT)
    metrics = read_metrics_csv(run_dir / METRICS_CSV)
    checkpoints = {
        m.epoch: run_dir / CHECKPOINT_DIR / f"epoch_{m.epoch}.ckpt"
        for m in metrics
        if (run_dir / CHECKPOINT_DIR / f"epoch_{m.epoch}.ckpt").is_file()
    }
    record = RunRecord(
        run_id=snapshot.run_id, task=snapshot.task, spec=snapshot.spec, schedule=snapshot.schedule,
        seed=snapshot.seed, metrics=metrics, criterion=snapshot.criterion,
        checkpoint_paths=checkpoints, run_dir=run_dir,
    )
    if metrics:
        record.selected_epoch = select_best_checkpoint(record, snapshot.criterion)
    return record
