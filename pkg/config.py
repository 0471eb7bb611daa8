"""Configuration constants for the lesion classification pipeline.

This module contains the defaults used throughout the pipeline, including
augmentation ranges, optimizer constants, file names, CSV headers and the
environment variables that control output location and logging.
"""

import os
from typing import Dict, List, Tuple

# Load environment variables from .env file (if available)
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    # dotenv not available, continue without it
    pass

# Environment variables
OUTPUT_ROOT_ENV = "LESION_OUTPUT_ROOT"
LOG_LEVEL_ENV = "LESION_LOG_LEVEL"
DEFAULT_OUTPUT_ROOT = "runs"
DEFAULT_LOG_LEVEL = "INFO"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def get_output_root() -> str:
    """Returns the default output root, honouring LESION_OUTPUT_ROOT."""
    return os.getenv(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)


def get_log_level() -> str:
    """Returns the default log level, honouring LESION_LOG_LEVEL."""
    return os.getenv(LOG_LEVEL_ENV, DEFAULT_LOG_LEVEL).upper()


# Ground truth
GROUND_TRUTH_HEADER = ["image_id", "melanoma", "seborrheic_keratosis"]
LABEL_VALUES: Dict[str, int] = {"0": 0, "1": 1, "0.0": 0, "1.0": 1}
DEFAULT_IMAGE_EXTENSION = ".jpg"

# Split
DEFAULT_SPLIT_FRACTION = 0.2
DEFAULT_SEED = 2017
TRAIN_CSV = "train.csv"
VAL_CSV = "val.csv"
SPLIT_META = "split.meta"

# Augmentation defaults (mild affine ranges, all configurable)
DEFAULT_SHEAR_RANGE_DEG = 10.0
DEFAULT_ZOOM_RANGE: Tuple[float, float] = (0.85, 1.15)
DEFAULT_SHIFT_FRACTION = 0.10
DEFAULT_HFLIP_PROB = 0.5
DEFAULT_VFLIP_PROB = 0.5
DEFAULT_EXPANSION_CAP = 8
DEFAULT_GLOBAL_TARGET_FACTOR = 5.0
AUGMENTED_MANIFEST_CSV = "augmented.csv"
AUGMENTED_MANIFEST_HEADER = [
    "image_id",
    "copy_index",
    "shear_deg",
    "zoom",
    "shift_x",
    "shift_y",
    "hflip",
    "vflip",
    "path",
]

# Model engine
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 5e-4
DEFAULT_BATCH_SIZE = 32
NUM_CLASSES = 2
# class 0 is the task's positive class, class 1 everything else
POSITIVE_INDEX = 0
CHECKPOINT_FORMAT_VERSION = 1
IMAGENET_MEAN = [0.485, 0.456, 0.406]
IMAGENET_STD = [0.229, 0.224, 0.225]
CROP_SIZE = 224
FINE_TUNE_SCOPES = ["all", "classifier"]

# Training harness
CHECKPOINT_DIR = "checkpoints"
METRICS_CSV = "metrics.csv"
METRICS_HEADER = ["epoch", "train_loss", "val_accuracy", "val_auc"]
CONFIG_SNAPSHOT = "config.snapshot"
SELECTION_CRITERIA = ["val_accuracy", "val_auc"]
DEFAULT_SELECTION_CRITERION = "val_accuracy"

# Ensemble / evaluation
DEFAULT_THRESHOLD = 0.5
SCORE_DECIMALS = 6
PREDICTION_HEADER = ["image_id", "score"]
AUC_AGREEMENT_TOLERANCE = 1e-9
REPORT_TEXT = "report.txt"
REPORT_KV = "report.kv"
ROC_CSV = "roc.csv"
ROC_PNG = "roc.png"
TRAINING_CURVES_PNG = "training_curves.png"

# CLI / experiments
FAILED_MARKER = "FAILED"
REGISTRY_DB = "runs.db"
RUNS_DIR = "runs"

# Desk-scale surrogate runs: geometry shrinks by this divisor, schedules are
# compressed to SURROGATE_EPOCHS and rescaled so the first stage runs at
# SURROGATE_BASE_LR (stage ratios kept).
SURROGATE_GEOMETRY_DIVISOR = 8
SURROGATE_EPOCHS = 9
SURROGATE_BASE_LR = 0.05
EXPERIMENT_CONFIG = "experiment.cfg"
SPLIT_DIR = "split"
AUGMENTED_DIR = "augmented"
PREDICTIONS_DIR = "predictions"
REPORT_DIR = "report"
SYNTHETIC_IMAGE_SIZE = 64
SYNTHETIC_IMAGE_COUNT = 200
SYNTHETIC_CLASS_MIX: Dict[str, float] = {
    "Melanoma": 0.3,
    "SeborrheicKeratosis": 0.2,
    "Nevus": 0.5,
}

# Shipped model presets: name -> (task, architecture, input size, crop-from, schedule id)
MODEL_PRESETS: Dict[str, Tuple[str, str, int, int, str]] = {
    "sk_alexnet350": ("sk", "AlexNetStyle", 350, 0, "SK_AlexNet350"),
    "mel_googlenet256": ("melanoma", "GoogleNetStyle", 224, 256, "Mel_GoogleNet256"),
    "mel_googlenet224": ("melanoma", "GoogleNetStyle", 224, 0, "Mel_GoogleNet224"),
    "mel_alexnet224": ("melanoma", "AlexNetStyle", 224, 0, "Mel_AlexNet224"),
}

# Experiment presets: name -> model presets fused for the task
EXPERIMENT_PRESETS: Dict[str, List[str]] = {
    "sk_alexnet350": ["sk_alexnet350"],
    "mel_googlenet256": ["mel_googlenet256"],
    "mel_googlenet224": ["mel_googlenet224"],
    "mel_alexnet224": ["mel_alexnet224"],
    "mel_ensemble": ["mel_googlenet256", "mel_googlenet224", "mel_alexnet224"],
}
TASK_RECIPES: Dict[str, str] = {"sk": "sk_alexnet350", "melanoma": "mel_ensemble"}
