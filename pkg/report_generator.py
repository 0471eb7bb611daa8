"""
Report generator for the lesion classification pipeline.

Turns an EvalReport into the human-readable summary, the flat key-value file
and the ROC point table, and draws ROC and training curves when matplotlib is
installed.
"""

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from config import REPORT_KV, REPORT_TEXT, ROC_CSV, ROC_PNG, TRAINING_CURVES_PNG
from metrics import EvalReport
from utils import write_key_values

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    MATPLOTLIB_AVAILABLE = True
except ImportError:
    MATPLOTLIB_AVAILABLE = False
    logger.warning("matplotlib not available - plots will be disabled")


def _fmt(value: Optional[float], digits: int = 4) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def format_report_text(report: EvalReport) -> str:
    """Human-readable summary of one evaluation."""
    cm = report.confusion
    lines = [
        f"Evaluation of {report.source or 'predictions'} ({report.task})",
        f"Images: {report.n_images}   threshold: {report.threshold:g}",
        "",
        f"Accuracy:    {_fmt(report.accuracy)}",
        f"Sensitivity: {_fmt(report.sensitivity)}",
        f"Specificity: {_fmt(report.specificity)}",
        f"AUC:         {_fmt(report.auc)}",
        "",
        "Confusion matrix (rows: actual, cols: predicted)",
        "              positive  negative",
        f"  positive    {cm.tp:8d}  {cm.fn:8d}",
        f"  negative    {cm.fp:8d}  {cm.tn:8d}",
    ]
    if report.per_class_accuracy:
        lines.append("")
        lines.append("Per-class accuracy")
        for name, value in report.per_class_accuracy.items():
            lines.append(f"  {name:<10}  {_fmt(value)}")
    return "\n".join(lines) + "\n"


def report_key_values(report: EvalReport) -> List[Tuple[str, object]]:
    cm = report.confusion
    items: List[Tuple[str, object]] = [
        ("source", report.source),
        ("task", report.task),
        ("n_images", report.n_images),
        ("threshold", repr(report.threshold)),
        ("tp", cm.tp),
        ("fp", cm.fp),
        ("tn", cm.tn),
        ("fn", cm.fn),
        ("accuracy", None if report.accuracy is None else repr(report.accuracy)),
        ("sensitivity", None if report.sensitivity is None else repr(report.sensitivity)),
        ("specificity", None if report.specificity is None else repr(report.specificity)),
        ("auc", None if report.auc is None else repr(report.auc)),
    ]
    for name, value in report.per_class_accuracy.items():
        items.append((f"class_accuracy.{name}", None if value is None else repr(value)))
    return items


def write_roc_csv(report: EvalReport, path: PathLike) -> Optional[Path]:
    if report.roc is None:
        return None
    path = Path(path)
    frame = pd.DataFrame({
        "threshold": ["inf" if math.isinf(t) else repr(t) for t in report.roc.thresholds],
        "fpr": report.roc.fpr,
        "tpr": report.roc.tpr,
    })
    frame.to_csv(path, index=False)
    return path


def write_report(report: EvalReport, out_dir: PathLike, plots: bool = True) -> Dict[str, Path]:
    """Writes report.txt, report.kv and (when AUC applies) roc.csv / roc.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    text_path = out_dir / REPORT_TEXT
    text_path.write_text(format_report_text(report), encoding="utf-8")
    written["text"] = text_path
    written["kv"] = write_key_values(out_dir / REPORT_KV, report_key_values(report))
    roc_path = write_roc_csv(report, out_dir / ROC_CSV)
    if roc_path is not None:
        written["roc"] = roc_path
        if plots:
            png = plot_roc([report], out_dir / ROC_PNG)
            if png is not None:
                written["roc_png"] = png
    logger.info(f"[REPORT] wrote {', '.join(p.name for p in written.values())} to {out_dir}")
    return written


def plot_roc(reports: Sequence[EvalReport], path: PathLike) -> Optional[Path]:
    """Draws one ROC curve per report on shared axes. Returns the path."""
    if not MATPLOTLIB_AVAILABLE:
        logger.warning("matplotlib not available - cannot create ROC plot")
        return None
    curves = [r for r in reports if r.roc is not None]
    if not curves:
        return None

    try:
        fig, ax = plt.subplots(figsize=(6, 6))
        for r in curves:
            ax.plot(r.roc.fpr, r.roc.tpr, linewidth=2, label=f"{r.source or r.task} (AUC {_fmt(r.auc)})")
        ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=1)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower right")
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, dpi=150)
        plt.close(fig)
        return path
    except Exception as e:
        logger.error(f"Error creating ROC plot: {e}")
        return None


def plot_training_curves(metrics, path: PathLike, title: str = "") -> Optional[Path]:
    """Plots train loss and validation accuracy/AUC per epoch."""
    if not MATPLOTLIB_AVAILABLE:
        logger.warning("matplotlib not available - cannot create training plot")
        return None
    if not metrics:
        return None

    try:
        epochs = [m.epoch for m in metrics]
        fig, (loss_ax, val_ax) = plt.subplots(1, 2, figsize=(10, 4))
        loss_ax.plot(epochs, [m.train_loss for m in metrics], marker="o")
        loss_ax.set_title("Training loss")
        loss_ax.set_xlabel("epoch")
        val_ax.plot(epochs, [m.val_accuracy for m in metrics], marker="o", label="accuracy")
        aucs = [math.nan if m.val_auc is None else m.val_auc for m in metrics]
        val_ax.plot(epochs, aucs, marker="s", label="AUC")
        val_ax.set_title("Validation")
        val_ax.set_xlabel("epoch")
        val_ax.set_ylim(0, 1)
        val_ax.legend()
        for ax in (loss_ax, val_ax):
            ax.grid(True, alpha=0.3)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, dpi=150)
        plt.close(fig)
        return path
    except Exception as e:
        logger.error(f"Error creating training curves plot: {e}")
        return None


def write_training_curves(record, plots: bool = True) -> Optional[Path]:
    if not plots or record.run_dir is None:
        return None
    return plot_training_curves(record.metrics, record.run_dir / TRAINING_CURVES_PNG, title=record.run_id)
