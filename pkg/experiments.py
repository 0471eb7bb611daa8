"""
Experiment configuration and end-to-end pipeline steps.

An experiment is described by a flat, typed key-value config file. The steps
here (split, augment, train, predict, ensemble, evaluate) are what the
command-line subcommands call; `run_experiment` chains them and
`reproduce_recipe` runs a task's shipped recipe end to end.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from augmentation import AugmentationConfig, augmented_to_dataset_manifest, expand_dataset
from config import (
    AUGMENTED_DIR,
    CONFIG_SNAPSHOT,
    DEFAULT_BATCH_SIZE,
    DEFAULT_EXPANSION_CAP,
    DEFAULT_GLOBAL_TARGET_FACTOR,
    DEFAULT_HFLIP_PROB,
    DEFAULT_IMAGE_EXTENSION,
    DEFAULT_MOMENTUM,
    DEFAULT_SEED,
    DEFAULT_SELECTION_CRITERION,
    DEFAULT_SHEAR_RANGE_DEG,
    DEFAULT_SHIFT_FRACTION,
    DEFAULT_SPLIT_FRACTION,
    DEFAULT_THRESHOLD,
    DEFAULT_VFLIP_PROB,
    DEFAULT_WEIGHT_DECAY,
    DEFAULT_ZOOM_RANGE,
    EXPERIMENT_CONFIG,
    EXPERIMENT_PRESETS,
    FINE_TUNE_SCOPES,
    MODEL_PRESETS,
    PREDICTIONS_DIR,
    REPORT_DIR,
    RUNS_DIR,
    SELECTION_CRITERIA,
    SPLIT_DIR,
    SURROGATE_BASE_LR,
    SURROGATE_EPOCHS,
    SURROGATE_GEOMETRY_DIVISOR,
    TASK_RECIPES,
    get_output_root,
)
from dataset import (
    DatasetManifest,
    DatasetSplit,
    Task,
    class_histogram,
    derive_task_manifest,
    load_manifest,
    parse_task,
    stratified_split,
    write_split,
)
from db import RunRegistry
from ensemble import ENSEMBLE_SOURCE, PredictionSet, ensemble_mean, predict_dataset, write_prediction_csv
from errors import ConfigError, SpecValidationError
from metrics import EvalReport, evaluate
from models import Architecture, BackboneSpec, load_checkpoint
from report_generator import plot_roc, write_report, write_training_curves
from synthetic import SYNTHETIC_EXTENSION, generate_synthetic_dataset
from training import (
    RunRecord,
    TrainingSchedule,
    compress_schedule,
    make_paper_schedule,
    read_run_snapshot,
    scale_learning_rates,
    train,
)
from utils import derive_seed, format_bool, parse_bool, prepare_output_dir

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class ExperimentConfig:
    task: str = "melanoma"
    ground_truth_csv: str = ""
    image_root: str = ""
    image_extension: str = DEFAULT_IMAGE_EXTENSION
    split_fraction: float = DEFAULT_SPLIT_FRACTION
    split_seed: int = DEFAULT_SEED
    augment: bool = True
    aug_shear_deg: float = DEFAULT_SHEAR_RANGE_DEG
    aug_zoom_min: float = DEFAULT_ZOOM_RANGE[0]
    aug_zoom_max: float = DEFAULT_ZOOM_RANGE[1]
    aug_shift_fraction: float = DEFAULT_SHIFT_FRACTION
    aug_hflip_prob: float = DEFAULT_HFLIP_PROB
    aug_vflip_prob: float = DEFAULT_VFLIP_PROB
    aug_expansion_cap: int = DEFAULT_EXPANSION_CAP
    aug_target_factor: float = DEFAULT_GLOBAL_TARGET_FACTOR
    aug_seed: int = DEFAULT_SEED
    aug_resize_before: int = 0
    models: List[str] = field(default_factory=list)
    pretrained_dir: str = ""
    ensemble: bool = True
    threshold: float = DEFAULT_THRESHOLD
    output_dir: str = ""
    train_seed: int = DEFAULT_SEED
    batch_size: int = DEFAULT_BATCH_SIZE
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    selection_criterion: str = DEFAULT_SELECTION_CRITERION
    fine_tune_scope: str = "all"
    n_crops: int = 1
    surrogate: bool = False
    surrogate_epochs: int = SURROGATE_EPOCHS
    surrogate_base_lr: float = SURROGATE_BASE_LR
    workers: int = 1

    def augmentation_config(self) -> AugmentationConfig:
        return AugmentationConfig(
            shear_range_deg=self.aug_shear_deg,
            zoom_range=(self.aug_zoom_min, self.aug_zoom_max),
            shift_fraction=self.aug_shift_fraction,
            hflip_prob=self.aug_hflip_prob,
            vflip_prob=self.aug_vflip_prob,
            expansion_cap=self.aug_expansion_cap,
            global_target_factor=self.aug_target_factor,
            seed=self.aug_seed,
            resize_before_augment=self.aug_resize_before or None,
        )

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(get_output_root()) / f"{parse_task(self.task).value}_experiment"

    def model_names(self) -> List[str]:
        if self.models:
            return list(self.models)
        return list(EXPERIMENT_PRESETS[TASK_RECIPES[parse_task(self.task).value]])

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, split_seed=seed, aug_seed=seed, train_seed=seed)


def _parse_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


_PARSERS: Dict[type, Callable[[str], object]] = {
    str: str,
    int: int,
    float: float,
    bool: parse_bool,
    list: _parse_list,
}


def _key_types() -> Dict[str, type]:
    types = {}
    for f in fields(ExperimentConfig):
        types[f.name] = list if f.name == "models" else f.type
    return types


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return format_bool(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    """Parses `key = value` lines; `#` starts a comment line. Unknown keys are errors."""
    types = _key_types()
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw!r}", line=number)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in types:
            raise ConfigError(f"unknown key {key!r}", line=number)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=number)
        try:
            values[key] = _PARSERS[types[key]](value)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}", line=number) from e
    config = ExperimentConfig(**values)
    validate_config(config, check_paths=False)
    return config


def serialize_config(config: ExperimentConfig) -> str:
    lines = ["# lesion pipeline experiment"]
    for f in fields(ExperimentConfig):
        lines.append(f"{f.name} = {_format_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path: PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


def save_config(config: ExperimentConfig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_config(config), encoding="utf-8")
    return path


def validate_config(config: ExperimentConfig, check_paths: bool = True) -> None:
    try:
        task = parse_task(config.task)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    for name in config.model_names():
        if name not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {name!r} (known: {', '.join(MODEL_PRESETS)})")
        if MODEL_PRESETS[name][0] != task.value:
            raise ConfigError(f"model preset {name} belongs to task {MODEL_PRESETS[name][0]}, not {task.value}")
    if config.selection_criterion not in SELECTION_CRITERIA:
        raise ConfigError(f"selection_criterion must be one of {SELECTION_CRITERIA}")
    if config.fine_tune_scope not in FINE_TUNE_SCOPES:
        raise ConfigError(f"fine_tune_scope must be one of {FINE_TUNE_SCOPES}")
    if not 0.0 < config.split_fraction < 1.0:
        raise ConfigError(f"split_fraction must be in (0, 1), got {config.split_fraction}")
    if config.n_crops not in (1, 5):
        raise ConfigError(f"n_crops must be 1 or 5, got {config.n_crops}")
    if config.batch_size < 1 or config.workers < 1 or config.surrogate_epochs < 1:
        raise ConfigError("batch_size, workers and surrogate_epochs must be >= 1")
    try:
        config.augmentation_config()
    except ValueError as e:
        raise ConfigError(f"augmentation settings: {e}") from e
    if check_paths:
        if not config.ground_truth_csv or not Path(config.ground_truth_csv).is_file():
            raise ConfigError(f"ground_truth_csv not found: {config.ground_truth_csv!r}")
        if not config.image_root or not Path(config.image_root).is_dir():
            raise ConfigError(f"image_root not found: {config.image_root!r}")
        if config.pretrained_dir and not Path(config.pretrained_dir).is_dir():
            raise ConfigError(f"pretrained_dir not found: {config.pretrained_dir!r}")


@dataclass(frozen=True)
class ModelPlan:
    name: str
    spec: BackboneSpec
    schedule_id: str
    schedule: TrainingSchedule


def _surrogate_size(size: int) -> int:
    return max(1, round(size / SURROGATE_GEOMETRY_DIVISOR))


def surrogate_schedule(schedule: TrainingSchedule, epochs: int, base_lr: float) -> TrainingSchedule:
    """Compresses a schedule and rescales it so its first stage runs at base_lr."""
    compressed = compress_schedule(schedule, max(epochs, len(schedule.stages)))
    return scale_learning_rates(compressed, base_lr / compressed.stages[0].learning_rate)


def preset_models(names: Sequence[str], surrogate: bool = False, pretrained_dir: str = "",
                  fine_tune_scope: str = "all", momentum: float = DEFAULT_MOMENTUM,
                  weight_decay: float = DEFAULT_WEIGHT_DECAY, batch_size: int = DEFAULT_BATCH_SIZE,
                  surrogate_epochs: int = SURROGATE_EPOCHS,
                  surrogate_base_lr: float = SURROGATE_BASE_LR) -> List[ModelPlan]:
    """Backbone specs and schedules for the named presets.

    With surrogate set, each backbone becomes a TinySurrogate at the preset's
    geometry divided by SURROGATE_GEOMETRY_DIVISOR, trained on the preset's
    schedule compressed to surrogate_epochs.
    """
    plans = []
    for name in names:
        if name not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {name!r}")
        _, arch, input_size, crop_from, schedule_id = MODEL_PRESETS[name]
        schedule = make_paper_schedule(schedule_id, momentum=momentum, weight_decay=weight_decay,
                                       batch_size=batch_size)
        if surrogate:
            spec = BackboneSpec(
                architecture_id=Architecture.TINY,
                input_size=_surrogate_size(input_size),
                random_crop_from=_surrogate_size(crop_from) if crop_from else None,
                fine_tune_scope=fine_tune_scope,
            )
            schedule = surrogate_schedule(schedule, surrogate_epochs, surrogate_base_lr)
        else:
            pretrained = None
            if pretrained_dir:
                candidate = Path(pretrained_dir) / f"{arch}.pth"
                pretrained = str(candidate) if candidate.is_file() else None
            spec = BackboneSpec(
                architecture_id=arch,
                input_size=input_size,
                random_crop_from=crop_from or None,
                pretrained_ref=pretrained,
                fine_tune_scope=fine_tune_scope,
            )
        plans.append(ModelPlan(name, spec, schedule_id, schedule))
    return plans


def plans_for(config: ExperimentConfig) -> List[ModelPlan]:
    return preset_models(
        config.model_names(),
        surrogate=config.surrogate,
        pretrained_dir=config.pretrained_dir,
        fine_tune_scope=config.fine_tune_scope,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        batch_size=config.batch_size,
        surrogate_epochs=config.surrogate_epochs,
        surrogate_base_lr=config.surrogate_base_lr,
    )


def preset_config(task: Union[Task, str], ground_truth_csv: str = "", image_root: str = "",
                  surrogate: bool = False, **overrides) -> ExperimentConfig:
    """The shipped recipe for a task as an ExperimentConfig."""
    task = parse_task(task)
    config = ExperimentConfig(
        task=task.value,
        ground_truth_csv=ground_truth_csv,
        image_root=image_root,
        models=list(EXPERIMENT_PRESETS[TASK_RECIPES[task.value]]),
        surrogate=surrogate,
    )
    return replace(config, **overrides) if overrides else config


@dataclass
class ExperimentResult:
    output_dir: Path
    split: DatasetSplit
    records: List[RunRecord]
    prediction_paths: Dict[str, Path]
    report: EvalReport


def run_split(config: ExperimentConfig, out_dir: PathLike) -> DatasetSplit:
    manifest = load_manifest(config.ground_truth_csv, config.image_root, config.image_extension)
    split = stratified_split(manifest, config.split_fraction, config.split_seed)
    write_split(split, out_dir)
    hist = class_histogram(split.validation)
    logger.info(
        f"[SPLIT] {len(split.train)} train / {len(split.validation)} validation "
        f"({', '.join(f'{d.value}={n}' for d, n in hist.items())} in validation)"
    )
    return split


def run_augment(config: ExperimentConfig, train_manifest: DatasetManifest, out_dir: PathLike,
                overwrite: bool = False) -> DatasetManifest:
    if not config.augment:
        logger.info("[AUGMENT] augmentation disabled; training on originals")
        return train_manifest
    augmented = expand_dataset(train_manifest, config.augmentation_config(), out_dir,
                               overwrite=overwrite, workers=config.workers)
    return augmented_to_dataset_manifest(augmented, train_manifest)


def _train_plan(args: Tuple) -> RunRecord:
    plan, train_set, val_set, seed, run_dir, criterion, threshold, loader_workers = args
    return train(plan.spec, plan.schedule, train_set, val_set, seed, run_dir=run_dir, run_id=plan.name,
                 criterion=criterion, threshold=threshold, workers=loader_workers)


def run_training(config: ExperimentConfig, plans: Sequence[ModelPlan], train_manifest: DatasetManifest,
                 val_manifest: DatasetManifest, runs_dir: PathLike,
                 registry: Optional[RunRegistry] = None) -> List[RunRecord]:
    """Trains every plan; independent runs go to separate processes when workers > 1.

    Each run's seed depends only on the base seed and the plan name, so serial
    and parallel execution produce the same artifacts.
    """
    task = parse_task(config.task)
    train_set = derive_task_manifest(train_manifest, task)
    val_set = derive_task_manifest(val_manifest, task)
    runs_dir = Path(runs_dir)
    jobs = [
        (plan, train_set, val_set, derive_seed(config.train_seed, "train", plan.name), runs_dir / plan.name,
         config.selection_criterion, config.threshold, 1 if config.workers > 1 and len(plans) > 1 else config.workers)
        for plan in plans
    ]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(jobs))) as pool:
            records = list(pool.map(_train_plan, jobs))
    else:
        records = [_train_plan(job) for job in jobs]

    for record in records:
        write_training_curves(record)
        if registry is not None:
            registry.register_run(record)
    return records


def predict_with_run(record: RunRecord, manifest: DatasetManifest, n_crops: int = 1,
                     batch_size: int = DEFAULT_BATCH_SIZE) -> PredictionSet:
    if record.best_checkpoint is None:
        raise SpecValidationError(f"run {record.run_id} has no selected checkpoint")
    model = load_checkpoint(record.best_checkpoint, expected_spec=record.spec)
    task_manifest = derive_task_manifest(manifest, record.task)
    return predict_dataset(model, task_manifest, n_crops=n_crops, batch_size=batch_size, source=record.run_id)


def evaluate_and_report(pred: PredictionSet, labels: Dict[str, int], threshold: float, out_dir: PathLike,
                        registry: Optional[RunRegistry] = None) -> EvalReport:
    report = evaluate(pred, labels, threshold)
    written = write_report(report, out_dir)
    if registry is not None:
        registry.record_evaluation(pred.source, report, written["text"])
    auc_text = "n/a" if report.auc is None else f"{report.auc:.4f}"
    logger.info(f"[EVAL] {pred.source}: accuracy={report.accuracy:.4f} auc={auc_text}")
    return report


def run_experiment(config: ExperimentConfig, overwrite: bool = False,
                   registry: Optional[RunRegistry] = None) -> ExperimentResult:
    """Split, augment, train every model, predict on validation, fuse and evaluate."""
    validate_config(config)
    root = prepare_output_dir(config.resolved_output_dir(), overwrite=overwrite)
    save_config(config, root / EXPERIMENT_CONFIG)
    task = parse_task(config.task)

    split = run_split(config, root / SPLIT_DIR)
    train_manifest = run_augment(config, split.train, root / AUGMENTED_DIR)
    plans = plans_for(config)
    records = run_training(config, plans, train_manifest, split.validation, root / RUNS_DIR, registry)

    prediction_dir = root / PREDICTIONS_DIR
    predictions = []
    prediction_paths = {}
    for record in records:
        pred = predict_with_run(record, split.validation, config.n_crops, config.batch_size)
        prediction_paths[record.run_id] = write_prediction_csv(pred, prediction_dir / f"{record.run_id}.csv")
        predictions.append(pred)

    labels = derive_task_manifest(split.validation, task).labels()
    member_reports = []
    if len(predictions) > 1:
        for pred in predictions:
            member_reports.append(evaluate_and_report(pred, labels, config.threshold,
                                                      root / REPORT_DIR / pred.source, registry))
    if config.ensemble or len(predictions) == 1:
        final = ensemble_mean(predictions)
    else:
        final = predictions[0]
    if final.source == ENSEMBLE_SOURCE:
        prediction_paths[ENSEMBLE_SOURCE] = write_prediction_csv(final, prediction_dir / f"{ENSEMBLE_SOURCE}.csv")
    report = evaluate_and_report(final, labels, config.threshold, root / REPORT_DIR, registry)
    if member_reports:
        plot_roc(member_reports + [report], root / REPORT_DIR / "roc_members.png")
    return ExperimentResult(root, split, records, prediction_paths, report)


def reproduce_recipe(task: Union[Task, str], output_dir: PathLike, ground_truth_csv: Optional[str] = None,
                     image_root: Optional[str] = None, image_extension: str = DEFAULT_IMAGE_EXTENSION,
                     surrogate: bool = False, seed: Optional[int] = None, workers: int = 1,
                     overwrite: bool = False, registry: Optional[RunRegistry] = None) -> ExperimentResult:
    """Runs a task's shipped recipe: one AlexNet for SK, a three-network mean for melanoma.

    Without a ground-truth CSV, a synthetic dataset is generated next to the
    experiment directory first.
    """
    output_dir = Path(output_dir)
    if not ground_truth_csv:
        data_dir = output_dir.parent / f"{output_dir.name}_synthetic_data"
        ground_truth_csv = str(generate_synthetic_dataset(data_dir, seed=seed if seed is not None else 0))
        image_root = str(data_dir / "images")
        image_extension = SYNTHETIC_EXTENSION
    config = preset_config(task, ground_truth_csv, image_root or "", surrogate=surrogate,
                           image_extension=image_extension, output_dir=str(output_dir), workers=workers)
    if seed is not None:
        config = config.with_seed(seed)
    logger.info(f"[RECIPE] {config.task}: {', '.join(config.model_names())}{' (surrogate)' if surrogate else ''}")
    return run_experiment(config, overwrite=overwrite, registry=registry)


def default_replay_dir(run_dir: PathLike, config: ExperimentConfig) -> Path:
    """`<run_id>_replay` next to the experiment directory the config points at."""
    snapshot = read_run_snapshot(Path(run_dir) / CONFIG_SNAPSHOT)
    return config.resolved_output_dir().parent / f"{snapshot.run_id}_replay"


def replay_run(run_dir: PathLike, config: ExperimentConfig, out_dir: PathLike,
               overwrite: bool = False) -> RunRecord:
    """Re-executes a finished run from its snapshot on data prepared from config."""
    snapshot = read_run_snapshot(Path(run_dir) / CONFIG_SNAPSHOT)
    validate_config(config)
    source, target = Path(run_dir).resolve(), Path(out_dir).resolve()
    if target == source or target in source.parents:
        raise ConfigError(f"replay output {out_dir} would overwrite the replayed run {run_dir}")
    root = prepare_output_dir(out_dir, overwrite=overwrite)
    split = run_split(config, root / SPLIT_DIR)
    train_manifest = run_augment(config, split.train, root / AUGMENTED_DIR)
    return train(
        snapshot.spec, snapshot.schedule,
        derive_task_manifest(train_manifest, snapshot.task),
        derive_task_manifest(split.validation, snapshot.task),
        snapshot.seed, run_dir=root / RUNS_DIR / snapshot.run_id, run_id=snapshot.run_id,
        criterion=snapshot.criterion, threshold=snapshot.threshold, workers=config.workers,
    )


def train_experiment(config: ExperimentConfig, overwrite: bool = False,
                     registry: Optional[RunRegistry] = None) -> List[RunRecord]:
    """Split, augment and train every model of the config; no prediction or fusion."""
    validate_config(config)
    root = prepare_output_dir(config.resolved_output_dir(), overwrite=overwrite)
    save_config(config, root / EXPERIMENT_CONFIG)
    split = run_split(config, root / SPLIT_DIR)
    train_manifest = run_augment(config, split.train, root / AUGMENTED_DIR)
    return run_training(config, plans_for(config), train_manifest, split.validation, root / RUNS_DIR, registry)
