"""
Model engine for the lesion classification pipeline.

This module provides the backbone registry (AlexNet-style, GoogleNet-style and
a tiny surrogate), pretrained-weight loading, softmax inference, momentum-SGD
update steps and checkpoint persistence.
"""

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torch import nn
from torchvision import models as tv_models

from config import (
    CHECKPOINT_FORMAT_VERSION,
    DEFAULT_MOMENTUM,
    DEFAULT_WEIGHT_DECAY,
    FINE_TUNE_SCOPES,
    IMAGENET_MEAN,
    IMAGENET_STD,
    NUM_CLASSES,
    POSITIVE_INDEX,
)
from errors import CheckpointError, NonFiniteLossError, ScheduleError, SpecValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class Architecture(str, Enum):
    ALEXNET = "AlexNetStyle"
    GOOGLENET = "GoogleNetStyle"
    TINY = "TinySurrogate"


@dataclass(frozen=True)
class BackboneSpec:
    architecture_id: Architecture
    input_size: int
    num_classes: int = NUM_CLASSES
    pretrained_ref: Optional[str] = None
    random_crop_from: Optional[int] = None
    fine_tune_scope: str = "all"

    def __post_init__(self):
        try:
            object.__setattr__(self, "architecture_id", Architecture(self.architecture_id))
        except ValueError as e:
            raise SpecValidationError(f"unknown architecture {self.architecture_id!r}") from e
        if self.num_classes < 2:
            raise SpecValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size < 1:
            raise SpecValidationError(f"input_size must be >= 1, got {self.input_size}")
        if self.fine_tune_scope not in FINE_TUNE_SCOPES:
            raise SpecValidationError(f"fine_tune_scope must be one of {FINE_TUNE_SCOPES}")

        arch = self.architecture_id
        if arch is Architecture.ALEXNET:
            if self.input_size not in (224, 350):
                raise SpecValidationError(f"AlexNetStyle accepts input 224 or 350, got {self.input_size}")
            if self.random_crop_from is not None:
                raise SpecValidationError("AlexNetStyle does not take random_crop_from")
        elif arch is Architecture.GOOGLENET:
            if self.input_size != 224:
                raise SpecValidationError(f"GoogleNetStyle accepts input 224, got {self.input_size}")
            if self.random_crop_from not in (None, 256):
                raise SpecValidationError(f"GoogleNetStyle random_crop_from must be 256, got {self.random_crop_from}")
        elif self.random_crop_from is not None and self.random_crop_from < self.input_size:
            raise SpecValidationError("random_crop_from must be >= input_size")

    @property
    def load_size(self) -> int:
        """Square size images are resized to before any crop."""
        return self.random_crop_from or self.input_size

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["architecture_id"] = self.architecture_id.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BackboneSpec":
        return cls(
            architecture_id=data["architecture_id"],
            input_size=int(data["input_size"]),
            num_classes=int(data.get("num_classes", NUM_CLASSES)),
            pretrained_ref=data.get("pretrained_ref") or None,
            random_crop_from=int(data["random_crop_from"]) if data.get("random_crop_from") else None,
            fine_tune_scope=data.get("fine_tune_scope", "all"),
        )


class TinySurrogate(nn.Module):
    """Two conv blocks and a linear head; stands in for the big backbones at desk scale."""

    def __init__(self, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(8, 16, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(16, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(self.features(x), 1))


def _construct(spec: BackboneSpec) -> nn.Module:
    if spec.architecture_id is Architecture.ALEXNET:
        # the adaptive 6x6 pool in front of the classifier lets 350px inputs
        # through the canonical 224px layout unchanged
        return tv_models.alexnet(weights=None, num_classes=spec.num_classes)
    if spec.architecture_id is Architecture.GOOGLENET:
        return tv_models.googlenet(weights=None, num_classes=spec.num_classes, aux_logits=False, init_weights=True)
    return TinySurrogate(spec.num_classes)


def _head_name(spec: BackboneSpec) -> str:
    if spec.architecture_id is Architecture.ALEXNET:
        return "classifier.6"
    return "fc"


def classifier_layer(model: Union["ModelState", nn.Module], spec: Optional[BackboneSpec] = None) -> nn.Linear:
    """Returns the final linear layer of any registered backbone."""
    if isinstance(model, ModelState):
        spec, network = model.spec, model.network
    else:
        network = model
    if spec is None:
        raise SpecValidationError("a spec is needed to locate the classifier of a bare network")
    return network.get_submodule(_head_name(spec))


@dataclass
class ModelState:
    """A backbone plus its optimizer state. Single writer: one trainer at a time."""

    spec: BackboneSpec
    network: nn.Module
    epoch: int = 0
    rng_state: Optional[torch.Tensor] = None
    optimizer: Optional[torch.optim.SGD] = field(default=None, repr=False)

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.network.parameters() if p.requires_grad]


def _load_state_dict_file(path: PathLike) -> Dict[str, torch.Tensor]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"pretrained weights not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if isinstance(payload, dict) and "state_dict" in payload:
        payload = payload["state_dict"]
    if not isinstance(payload, dict):
        raise CheckpointError(f"{path} does not hold a state dict")
    return payload


def _apply_pretrained(network: nn.Module, spec: BackboneSpec) -> None:
    """Copies every pretrained tensor except the classifier head, which keeps its fresh init."""
    pretrained = _load_state_dict_file(spec.pretrained_ref)
    head = _head_name(spec) + "."
    own = network.state_dict()
    merged = {}
    for key, tensor in own.items():
        if key.startswith(head):
            merged[key] = tensor
            continue
        if key not in pretrained:
            raise CheckpointError(f"{spec.pretrained_ref} lacks weight {key} for {spec.architecture_id.value}")
        if tuple(pretrained[key].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for {key}: checkpoint {tuple(pretrained[key].shape)} vs spec {tuple(tensor.shape)}"
            )
        merged[key] = pretrained[key]
    ignored = [k for k in pretrained if k not in own]
    if ignored:
        logger.debug(f"Ignoring {len(ignored)} pretrained tensors not used by {spec.architecture_id.value}")
    network.load_state_dict(merged)
    logger.info(f"Loaded pretrained weights from {spec.pretrained_ref}; classifier re-initialized for {spec.num_classes} classes")


def _apply_fine_tune_scope(network: nn.Module, spec: BackboneSpec) -> None:
    if spec.fine_tune_scope == "classifier":
        head = classifier_layer(network, spec)
        for p in network.parameters():
            p.requires_grad = False
        for p in head.parameters():
            p.requires_grad = True


def build_model(spec: BackboneSpec, init_seed: int) -> ModelState:
    """Builds a backbone; deterministic for a given seed.

    With spec.pretrained_ref set, every layer except the classifier comes from
    the checkpoint; the classifier is seeded fresh for num_classes.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        network = _construct(spec)
        rng_state = torch.get_rng_state()

    if spec.pretrained_ref:
        _apply_pretrained(network, spec)
    elif spec.architecture_id is not Architecture.TINY:
        logger.warning(
            f"No pretrained weights for {spec.architecture_id.value}; using seeded random init "
            "(results are from-scratch training, not fine-tuning)"
        )
    _apply_fine_tune_scope(network, spec)
    return ModelState(spec=spec, network=network, epoch=0, rng_state=rng_state)


def images_to_tensor(images: Sequence, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stacks RGB images into a normalized NCHW batch."""
    tensors = [TF.normalize(TF.to_tensor(img), IMAGENET_MEAN, IMAGENET_STD) for img in images]
    return torch.stack(tensors).to(dtype)


def _check_geometry(spec: BackboneSpec, images: Sequence) -> None:
    expected = (spec.input_size, spec.input_size)
    for img in images:
        if tuple(img.size) != expected:
            raise SpecValidationError(f"image size {img.size} does not match model input {expected}")


def forward_softmax(model: ModelState, batch: Sequence) -> List[np.ndarray]:
    """One float64 probability vector per image; no augmentation, no randomness."""
    if len(batch) == 0:
        return []
    _check_geometry(model.spec, batch)
    network = model.network
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            logits = network(images_to_tensor(batch))
            probs = torch.softmax(logits.double(), dim=1)
    finally:
        network.train(was_training)
    return [row for row in probs.numpy()]


def positive_probability(output: np.ndarray) -> float:
    return float(output[POSITIVE_INDEX])


def class_targets(labels: Sequence[int]) -> torch.Tensor:
    """Maps binary task labels (1 = task class) to class indices."""
    return torch.tensor([POSITIVE_INDEX if int(y) == 1 else 1 - POSITIVE_INDEX for y in labels], dtype=torch.long)


def batch_loss(network: nn.Module, inputs: torch.Tensor, labels: Sequence[int]) -> torch.Tensor:
    """Mean cross-entropy of the network on a batch (graph kept for backward)."""
    return F.cross_entropy(network(inputs), class_targets(labels))


def _ensure_optimizer(model: ModelState, lr: float, momentum: float, weight_decay: float) -> torch.optim.SGD:
    optimizer = model.optimizer
    if optimizer is not None:
        group = optimizer.param_groups[0]
        if group["momentum"] == momentum and group["weight_decay"] == weight_decay:
            return optimizer
        logger.info("Optimizer constants changed; momentum buffers reset")
    model.optimizer = torch.optim.SGD(
        model.trainable_parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay
    )
    return model.optimizer


def sgd_step(model: ModelState, batch: Sequence, labels: Sequence[int], lr: float,
             momentum: float = DEFAULT_MOMENTUM, weight_decay: float = DEFAULT_WEIGHT_DECAY,
             batch_ids: Sequence[str] = ()) -> Tuple[ModelState, float]:
    """One momentum-SGD update on the cross-entropy loss; returns the pre-update loss.

    The epoch counter is left alone; the training harness owns it.
    """
    if lr < 0:
        raise ScheduleError(f"learning rate must be non-negative, got {lr}")
    if len(batch) == 0:
        raise SpecValidationError("cannot take an SGD step on an empty batch")
    if len(batch) != len(labels):
        raise SpecValidationError(f"{len(batch)} images but {len(labels)} labels")
    _check_geometry(model.spec, batch)

    optimizer = _ensure_optimizer(model, lr, momentum, weight_decay)
    for group in optimizer.param_groups:
        group["lr"] = lr

    network = model.network
    network.train()
    optimizer.zero_grad(set_to_none=True)
    loss = batch_loss(network, images_to_tensor(batch), labels)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NonFiniteLossError(value, lr, batch_ids)
    loss.backward()
    optimizer.step()
    return model, value


def save_checkpoint(model: ModelState, path: PathLike) -> Path:
    """Writes the spec header, weights and optimizer state to one file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "epoch": int(model.epoch),
        "state_dict": model.network.state_dict(),
        "optimizer": model.optimizer.state_dict() if model.optimizer is not None else None,
        "rng_state": model.rng_state,
    }
    torch.save(payload, path)
    logger.debug(f"Saved checkpoint {path} (epoch {model.epoch})")
    return path


def load_checkpoint(path: PathLike, expected_spec: Optional[BackboneSpec] = None) -> ModelState:
    """Reloads a checkpoint; refuses unknown versions and architecture mismatches."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a pipeline checkpoint")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path} has unsupported format version {payload['format_version']}")

    spec = BackboneSpec.from_dict(payload["spec"])
    if expected_spec is not None:
        if spec.architecture_id != expected_spec.architecture_id:
            raise CheckpointError(
                f"{path} holds {spec.architecture_id.value}, expected {expected_spec.architecture_id.value}"
            )
        if (spec.input_size, spec.num_classes) != (expected_spec.input_size, expected_spec.num_classes):
            raise CheckpointError(f"{path} geometry does not match the expected spec")

    with torch.random.fork_rng(devices=[]):
        network = _construct(spec)
    try:
        network.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise CheckpointError(f"{path}: weights do not fit {spec.architecture_id.value}: {e}") from e
    _apply_fine_tune_scope(network, spec)

    model = ModelState(spec=spec, network=network, epoch=int(payload["epoch"]), rng_state=payload.get("rng_state"))
    optimizer_state = payload.get("optimizer")
    if optimizer_state is not None:
        group = optimizer_state["param_groups"][0]
        optimizer = _ensure_optimizer(model, group["lr"], group["momentum"], group["weight_decay"])
        optimizer.load_state_dict(optimizer_state)
    return model
