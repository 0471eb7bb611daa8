"""
Main entry point for the lesion classification pipeline.

Parses the command line, configures logging and dispatches to the pipeline
subcommands. Pipeline errors are logged, leave a FAILED marker in the
subcommand's output directory and exit with status 1.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from augmentation import AugmentationConfig, expand_dataset
from config import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_IMAGE_EXTENSION,
    DEFAULT_SPLIT_FRACTION,
    DEFAULT_SEED,
    DEFAULT_THRESHOLD,
    LOG_FORMAT,
    REGISTRY_DB,
    get_log_level,
    get_output_root,
)
from dataset import derive_task_manifest, load_manifest, read_labels_csv, stratified_split, write_split
from db import RunRegistry
from ensemble import ensemble_mean, predict_dataset, read_prediction_csv, write_prediction_csv
from errors import ConfigError, OutputCollisionError, PipelineError
from experiments import (
    default_replay_dir,
    load_config,
    preset_config,
    replay_run,
    reproduce_recipe,
    save_config,
    train_experiment,
)
from metrics import bootstrap_auc_interval, evaluate
from models import load_checkpoint
from report_generator import format_report_text, write_report
from utils import clear_failed_marker, prepare_output_dir, write_failed_marker

logger = logging.getLogger(__name__)


def _default_dir(name: str) -> str:
    return str(Path(get_output_root()) / name)


def _registry(args) -> RunRegistry:
    return RunRegistry(args.registry or Path(get_output_root()) / REGISTRY_DB)


def cmd_split(args) -> int:
    manifest = load_manifest(args.ground_truth, args.image_root, args.extension)
    out_dir = prepare_output_dir(args.output_dir, overwrite=args.overwrite)
    split = stratified_split(manifest, args.fraction, args.seed)
    paths = write_split(split, out_dir)
    logger.info(f"[CLI] split {len(manifest)} records: {len(split.train)} train / {len(split.validation)} val")
    for path in paths.values():
        print(path)
    return 0


def cmd_augment(args) -> int:
    aug_config = load_config(args.config).augmentation_config() if args.config else AugmentationConfig()
    if args.seed is not None:
        aug_config = replace(aug_config, seed=args.seed)
    manifest = load_manifest(args.train_csv, args.image_root, args.extension)
    augmented = expand_dataset(manifest, aug_config, args.output_dir,
                               overwrite=args.overwrite, workers=args.workers)
    print(f"{len(augmented)} images from {len(manifest)} sources in {args.output_dir}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.surrogate:
        config.surrogate = True
    if args.replay:
        args.output_dir = args.output_dir or str(default_replay_dir(args.replay, config))
        records = [replay_run(args.replay, config, args.output_dir, overwrite=args.overwrite)]
    else:
        if args.output_dir:
            config.output_dir = args.output_dir
        records = train_experiment(config, overwrite=args.overwrite, registry=_registry(args))
    for record in records:
        print(f"{record.run_id}: selected epoch {record.selected_epoch} -> {record.best_checkpoint}")
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = derive_task_manifest(load_manifest(args.ground_truth, args.image_root, args.extension), args.task)
    pred = predict_dataset(model, manifest, n_crops=args.n_crops, batch_size=args.batch_size,
                           source=Path(args.output).stem)
    write_prediction_csv(pred, args.output)
    print(args.output)
    return 0


def cmd_ensemble(args) -> int:
    sets = [read_prediction_csv(path, args.task) for path in args.inputs]
    fused = ensemble_mean(sets)
    write_prediction_csv(fused, args.output)
    logger.info(f"[CLI] fused {len(sets)} prediction sets over {len(fused)} images")
    print(args.output)
    return 0


def cmd_evaluate(args) -> int:
    pred = read_prediction_csv(args.predictions, args.task)
    labels = read_labels_csv(args.ground_truth, args.task)
    report = evaluate(pred, labels, args.threshold)
    out_dir = prepare_output_dir(args.output_dir, overwrite=args.overwrite)
    written = write_report(report, out_dir)
    _registry(args).record_evaluation(pred.source, report, written["text"])
    print(format_report_text(report), end="")
    if args.bootstrap and report.auc is not None:
        interval = bootstrap_auc_interval(pred.scores(), labels, n_resamples=args.bootstrap, seed=args.seed)
        if interval is not None:
            print(f"AUC 95% bootstrap interval: [{interval[0]:.4f}, {interval[1]:.4f}]")
    return 0


def cmd_reproduce(args) -> int:
    result = reproduce_recipe(
        args.task,
        args.output_dir,
        ground_truth_csv=args.ground_truth,
        image_root=args.image_root,
        image_extension=args.extension,
        surrogate=args.surrogate,
        seed=args.seed,
        workers=args.workers,
        overwrite=args.overwrite,
        registry=_registry(args),
    )
    print(format_report_text(result.report), end="")
    return 0


def cmd_init_config(args) -> int:
    config = preset_config(args.task, args.ground_truth or "", args.image_root or "", surrogate=args.surrogate)
    output = Path(args.output)
    if output.exists() and not args.overwrite:
        raise ConfigError(f"{output} already exists (pass --overwrite to replace it)")
    save_config(config, output)
    print(output)
    return 0


def cmd_runs(args) -> int:
    runs = _registry(args).list_runs(task=args.task)
    if not runs:
        print("No runs registered.")
        return 0
    for run in runs:
        print(
            f"{run['run_id']:<20} {run['task']:<9} {run['architecture_id']:<15} "
            f"{run['schedule_id'] or '-':<18} epoch={run['selected_epoch']} {run['run_dir']}"
        )
    return 0


def _add_common(parser: argparse.ArgumentParser, output_default: Optional[str] = None) -> None:
    parser.add_argument("--output-dir", default=output_default, help="directory for this command's outputs")
    parser.add_argument("--overwrite", action="store_true", help="replace an existing output directory")


def _add_images(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("--image-root", required=required, help="directory holding the lesion images")
    parser.add_argument("--extension", default=DEFAULT_IMAGE_EXTENSION, help="image file extension")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesion-pipeline", description="Skin lesion classification pipeline")
    parser.add_argument("--log-level", default=None, help="logging level (default from LESION_LOG_LEVEL or INFO)")
    parser.add_argument("--registry", default=None, help="run registry database (default <output root>/runs.db)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="stratified train/validation split of a ground-truth CSV")
    p.add_argument("--ground-truth", required=True)
    _add_images(p)
    p.add_argument("--fraction", type=float, default=DEFAULT_SPLIT_FRACTION)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    _add_common(p, _default_dir("split"))
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", help="expand a training CSV with augmented copies")
    p.add_argument("--train-csv", required=True)
    _add_images(p)
    p.add_argument("--config", default=None, help="experiment config supplying augmentation settings")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    _add_common(p, _default_dir("augmented"))
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="split, augment and train the models of an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--surrogate", action="store_true", help="train desk-scale surrogate backbones")
    p.add_argument("--replay", default=None, metavar="RUN_DIR", help="re-execute a finished run from its snapshot")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ground-truth", required=True, help="CSV listing the images to score")
    _add_images(p)
    p.add_argument("--task", required=True, choices=["melanoma", "sk"])
    p.add_argument("--output", required=True, help="prediction CSV to write")
    p.add_argument("--n-crops", type=int, default=1, choices=[1, 5])
    p.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="fuse prediction CSVs by their mean")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--task", required=True, choices=["melanoma", "sk"])
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", help="score a prediction CSV against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--task", required=True, choices=["melanoma", "sk"])
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--bootstrap", type=int, default=0, metavar="N", help="bootstrap resamples for an AUC interval")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p, _default_dir("evaluation"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce-paper", help="run a task's shipped recipe end to end")
    p.add_argument("--task", required=True, choices=["melanoma", "sk"])
    p.add_argument("--ground-truth", default=None, help="omit to generate a synthetic dataset")
    _add_images(p, required=False)
    p.add_argument("--surrogate", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("init-config", help="write a task's preset experiment config")
    p.add_argument("--task", required=True, choices=["melanoma", "sk"])
    p.add_argument("--output", required=True)
    p.add_argument("--ground-truth", default=None)
    p.add_argument("--image-root", default=None)
    p.add_argument("--surrogate", action="store_true")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("runs", help="list registered training runs")
    p.add_argument("--task", default=None, choices=["melanoma", "sk"])
    p.set_defaults(func=cmd_runs)
    return parser


def _failure_dir(args) -> Optional[Path]:
    if getattr(args, "output_dir", None):
        return Path(args.output_dir)
    if getattr(args, "output", None):
        return Path(args.output).parent
    if args.command == "reproduce-paper":
        return Path(_default_dir(f"{args.task}_experiment"))
    return None


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(format=LOG_FORMAT, level=(args.log_level or get_log_level()).upper())

    if args.command == "reproduce-paper" and not args.output_dir:
        args.output_dir = _default_dir(f"{args.task}_experiment")
    try:
        status = args.func(args)
        failure_dir = _failure_dir(args)
        if failure_dir is not None and failure_dir.is_dir():
            clear_failed_marker(failure_dir)
        return status
    except OutputCollisionError as e:
        logger.error(f"[CLI] {args.command} failed: {e}")
        return 1
    except (PipelineError, ValueError, OSError) as e:
        logger.error(f"[CLI] {args.command} failed: {e}")
        failure_dir = _failure_dir(args)
        if failure_dir is not None:
            write_failed_marker(failure_dir, f"{args.command}: {e}")
        return 1
    except Exception as e:
        logger.exception(f"[CLI] {args.command} failed unexpectedly: {e}")
        failure_dir = _failure_dir(args)
        if failure_dir is not None:
            write_failed_marker(failure_dir, f"{args.command}: {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
