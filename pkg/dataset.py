"""
Dataset module for the lesion classification pipeline.

This module ingests ISIC-style ground-truth CSVs, derives the per-task binary
labels, and produces the stratified train/validation split.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from config import (
    DEFAULT_IMAGE_EXTENSION,
    GROUND_TRUTH_HEADER,
    LABEL_VALUES,
    SPLIT_META,
    TRAIN_CSV,
    VAL_CSV,
)
from errors import ManifestParseError, ManifestValidationError, SplitError
from utils import derive_seed, write_key_values

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class Diagnosis(str, Enum):
    MELANOMA = "Melanoma"
    SEBORRHEIC_KERATOSIS = "SeborrheicKeratosis"
    NEVUS = "Nevus"


class Task(str, Enum):
    MELANOMA = "melanoma"
    SEBORRHEIC_KERATOSIS = "sk"

    @property
    def positive_diagnosis(self) -> Diagnosis:
        if self is Task.MELANOMA:
            return Diagnosis.MELANOMA
        return Diagnosis.SEBORRHEIC_KERATOSIS


def parse_task(value: Union[str, "Task"]) -> Task:
    """Accepts a Task or one of melanoma / sk / seborrheic_keratosis."""
    if isinstance(value, Task):
        return value
    lowered = str(value).strip().lower()
    if lowered in ("sk", "seborrheic_keratosis", "seborrheickeratosis"):
        return Task.SEBORRHEIC_KERATOSIS
    if lowered in ("melanoma", "mel"):
        return Task.MELANOMA
    raise ValueError(f"unknown task: {value!r}")


@dataclass(frozen=True)
class LesionRecord:
    """One image with its three-way diagnosis; binary labels derive from it."""

    image_id: str
    image_path: Path
    diagnosis: Diagnosis

    @property
    def melanoma_label(self) -> int:
        return int(self.diagnosis is Diagnosis.MELANOMA)

    @property
    def sk_label(self) -> int:
        return int(self.diagnosis is Diagnosis.SEBORRHEIC_KERATOSIS)

    def label_for(self, task: Task) -> int:
        return int(self.diagnosis is task.positive_diagnosis)


@dataclass(frozen=True)
class DatasetManifest:
    records: Tuple[LesionRecord, ...]
    source_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for record in self.records:
            if record.image_id in seen:
                raise ManifestValidationError(f"duplicate image_id {record.image_id} in {self.source_tag or 'manifest'}")
            seen.add(record.image_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[LesionRecord]:
        return iter(self.records)

    @property
    def image_ids(self) -> List[str]:
        return [r.image_id for r in self.records]

    def by_id(self) -> Dict[str, LesionRecord]:
        return {r.image_id: r for r in self.records}


@dataclass(frozen=True)
class DatasetSplit:
    train: DatasetManifest
    validation: DatasetManifest
    fraction: float
    seed: int


@dataclass(frozen=True)
class TaskRecord:
    image_id: str
    image_path: Path
    label: int


@dataclass(frozen=True)
class TaskManifest:
    """Binary-labeled view of a manifest for one task (1 = task class)."""

    task: Task
    records: Tuple[TaskRecord, ...] = field(default_factory=tuple)
    source_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TaskRecord]:
        return iter(self.records)

    @property
    def positives(self) -> int:
        return sum(r.label for r in self.records)

    @property
    def negatives(self) -> int:
        return len(self.records) - self.positives

    def labels(self) -> Dict[str, int]:
        return {r.image_id: r.label for r in self.records}


def _parse_label(cell: object, column: str, line: int) -> int:
    text = "" if cell is None or (isinstance(cell, float) and np.isnan(cell)) else str(cell).strip()
    if text not in LABEL_VALUES:
        raise ManifestParseError(f"column {column} has invalid label value {text!r}", line=line)
    return LABEL_VALUES[text]


def diagnosis_from_labels(melanoma: int, sk: int, line: Optional[int] = None) -> Diagnosis:
    if melanoma and sk:
        where = f"line {line}: " if line is not None else ""
        raise ManifestValidationError(f"{where}melanoma and seborrheic_keratosis are both 1")
    if melanoma:
        return Diagnosis.MELANOMA
    if sk:
        return Diagnosis.SEBORRHEIC_KERATOSIS
    return Diagnosis.NEVUS


def read_ground_truth(csv_path: PathLike) -> List[Tuple[str, Diagnosis]]:
    """Parses a ground-truth CSV into (image_id, diagnosis) pairs in file order."""
    csv_path = Path(csv_path)
    try:
        frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.ParserError as e:
        raise ManifestParseError(f"{csv_path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise ManifestParseError(f"{csv_path}: empty file") from e

    columns = [c.strip() for c in frame.columns]
    if columns[: len(GROUND_TRUTH_HEADER)] != GROUND_TRUTH_HEADER:
        raise ManifestParseError(
            f"{csv_path}: expected header {','.join(GROUND_TRUTH_HEADER)}, got {','.join(columns)}", line=1
        )
    frame.columns = columns

    pairs = []
    seen: Dict[str, int] = {}
    for offset, row in enumerate(frame.itertuples(index=False)):
        line = offset + 2  # header is line 1
        image_id = str(row.image_id).strip()
        if not image_id:
            raise ManifestParseError("empty image_id", line=line)
        melanoma = _parse_label(row.melanoma, "melanoma", line)
        sk = _parse_label(row.seborrheic_keratosis, "seborrheic_keratosis", line)
        if image_id in seen:
            raise ManifestValidationError(f"line {line}: duplicate image_id {image_id} (first on line {seen[image_id]})")
        seen[image_id] = line
        pairs.append((image_id, diagnosis_from_labels(melanoma, sk, line)))
    return pairs


def load_manifest(csv_path: PathLike, image_root: PathLike,
                  extension: str = DEFAULT_IMAGE_EXTENSION) -> DatasetManifest:
    """Loads a ground-truth CSV, resolving image paths under image_root.

    Missing image files are logged, never dropped; see missing_images().
    """
    image_root = Path(image_root)
    records = [
        LesionRecord(image_id, image_root / f"{image_id}{extension}", diagnosis)
        for image_id, diagnosis in read_ground_truth(csv_path)
    ]
    manifest = DatasetManifest(tuple(records), source_tag=str(csv_path))
    missing = missing_images(manifest)
    if missing:
        logger.warning(
            f"{len(missing)} of {len(manifest)} images listed in {csv_path} are missing under {image_root}: "
            f"{', '.join(missing[:5])}{' ...' if len(missing) > 5 else ''}"
        )
    logger.info(f"Loaded {len(manifest)} records from {csv_path}")
    return manifest


def missing_images(manifest: DatasetManifest) -> List[str]:
    return [r.image_id for r in manifest if not Path(r.image_path).is_file()]


def read_labels_csv(csv_path: PathLike, task: Union[Task, str]) -> Dict[str, int]:
    """Reads task labels (1 = task class) straight from a ground-truth CSV."""
    task = parse_task(task)
    return {image_id: int(diagnosis is task.positive_diagnosis) for image_id, diagnosis in read_ground_truth(csv_path)}


def class_histogram(manifest: DatasetManifest) -> Dict[Diagnosis, int]:
    histogram = {d: 0 for d in Diagnosis}
    for record in manifest:
        histogram[record.diagnosis] += 1
    return histogram


def stratified_split(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetSplit:
    """Moves round(fraction * n_c) records of every class into validation.

    The product is taken on the decimal value of `fraction`, so exact halves
    round to even.

    Each class is shuffled with its own seed (base seed mixed with the class),
    so adding or removing a class never perturbs another class's selection.
    Both halves keep the input order.
    """
    if not 0.0 < fraction < 1.0:
        raise SplitError(f"fraction must be in (0, 1), got {fraction}")
    if len(manifest) == 0:
        raise SplitError("cannot split an empty manifest")

    by_class: Dict[Diagnosis, List[int]] = {}
    for index, record in enumerate(manifest.records):
        by_class.setdefault(record.diagnosis, []).append(index)

    validation_indices = set()
    for diagnosis, indices in by_class.items():
        if not indices:
            raise SplitError(f"class {diagnosis.value} is empty")
        k = round(Fraction(str(fraction)) * len(indices))
        rng = np.random.default_rng(derive_seed(seed, "split", diagnosis.value))
        order = rng.permutation(len(indices))
        validation_indices.update(indices[i] for i in order[:k])
        logger.debug(f"Split class {diagnosis.value}: {len(indices) - k} train / {k} validation")

    train = tuple(r for i, r in enumerate(manifest.records) if i not in validation_indices)
    validation = tuple(r for i, r in enumerate(manifest.records) if i in validation_indices)
    tag = manifest.source_tag
    return DatasetSplit(
        train=DatasetManifest(train, source_tag=f"{tag}#train"),
        validation=DatasetManifest(validation, source_tag=f"{tag}#val"),
        fraction=fraction,
        seed=seed,
    )


def derive_task_manifest(manifest: DatasetManifest, task: Union[Task, str]) -> TaskManifest:
    task = parse_task(task)
    records = tuple(TaskRecord(r.image_id, r.image_path, r.label_for(task)) for r in manifest)
    return TaskManifest(task=task, records=records, source_tag=manifest.source_tag)


def write_manifest_csv(manifest: DatasetManifest, path: PathLike) -> Path:
    """Writes a manifest back out in the ground-truth CSV format."""
    path = Path(path)
    rows = [
        {"image_id": r.image_id, "melanoma": f"{r.melanoma_label:.1f}", "seborrheic_keratosis": f"{r.sk_label:.1f}"}
        for r in manifest
    ]
    pd.DataFrame(rows, columns=GROUND_TRUTH_HEADER).to_csv(path, index=False)
    return path


def write_split(split: DatasetSplit, out_dir: PathLike) -> Dict[str, Path]:
    """Writes train.csv, val.csv and split.meta into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_path = write_manifest_csv(split.train, out_dir / TRAIN_CSV)
    val_path = write_manifest_csv(split.validation, out_dir / VAL_CSV)

    meta = [("fraction", repr(split.fraction)), ("seed", split.seed)]
    train_hist = class_histogram(split.train)
    val_hist = class_histogram(split.validation)
    for diagnosis in Diagnosis:
        meta.append((f"train_{diagnosis.value}", train_hist[diagnosis]))
        meta.append((f"val_{diagnosis.value}", val_hist[diagnosis]))
    meta_path = write_key_values(out_dir / SPLIT_META, meta)
    logger.info(f"Wrote split ({len(split.train)} train / {len(split.validation)} validation) to {out_dir}")
    return {"train": train_path, "val": val_path, "meta": meta_path}
