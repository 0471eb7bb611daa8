"""
Exception hierarchy for the lesion classification pipeline.

Library modules raise these; only the command-line entry point catches them.
"""

from typing import Optional, Sequence


class PipelineError(Exception):
    """Base class for every error the pipeline raises on purpose."""


class ManifestParseError(PipelineError):
    """A ground-truth CSV row could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ManifestValidationError(PipelineError):
    """A manifest violates a label or uniqueness invariant."""


class SplitError(PipelineError):
    """Invalid stratified split request."""


class ImageReadError(PipelineError):
    """An image file is missing, unreadable or corrupt."""

    def __init__(self, path, reason: str = "unreadable image"):
        self.path = str(path)
        super().__init__(f"{reason}: {self.path}")


class ImageGeometryError(PipelineError):
    """An image has a degenerate or too-small geometry for the operation."""


class OutputCollisionError(PipelineError):
    """An output location already holds results and overwrite was not requested."""


class SpecValidationError(PipelineError):
    """A backbone spec or model input does not satisfy its invariants."""


class CheckpointError(PipelineError):
    """A checkpoint is unreadable, of an unknown version or does not fit the spec."""


class ScheduleError(PipelineError):
    """A learning-rate schedule is malformed or queried out of range."""


class NonFiniteLossError(PipelineError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, loss: float, lr: float, batch_ids: Sequence[str] = (),
                 epoch: Optional[int] = None):
        self.loss = loss
        self.lr = lr
        self.batch_ids = list(batch_ids)
        self.epoch = epoch
        super().__init__(self._describe())

    def _describe(self) -> str:
        shown = ", ".join(self.batch_ids[:8])
        if len(self.batch_ids) > 8:
            shown += ", ..."
        where = f" at epoch {self.epoch}" if self.epoch is not None else ""
        return f"non-finite loss {self.loss}{where} (lr={self.lr}, batch=[{shown}])"

    def at_epoch(self, epoch: int) -> "NonFiniteLossError":
        """Returns the same error with the epoch recorded."""
        return NonFiniteLossError(self.loss, self.lr, self.batch_ids, epoch)


class PredictionMismatchError(PipelineError):
    """Prediction sets disagree on image ids or task."""


class MetricError(PipelineError):
    """Metric inputs are inconsistent or a metric cannot be computed."""


class ConfigError(PipelineError):
    """An experiment config file is malformed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
