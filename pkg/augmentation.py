"""
Preprocessing and augmentation module for the lesion classification pipeline.

This module handles the geometric preprocessing of lesion images (aspect
preserving resize, random and center crops) and the seeded affine
augmentation that expands and rebalances the training set.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image, ImageOps, UnidentifiedImageError

from config import (
    AUGMENTED_MANIFEST_CSV,
    AUGMENTED_MANIFEST_HEADER,
    DEFAULT_EXPANSION_CAP,
    DEFAULT_GLOBAL_TARGET_FACTOR,
    DEFAULT_HFLIP_PROB,
    DEFAULT_SEED,
    DEFAULT_SHEAR_RANGE_DEG,
    DEFAULT_SHIFT_FRACTION,
    DEFAULT_VFLIP_PROB,
    DEFAULT_ZOOM_RANGE,
)
from dataset import DatasetManifest, LesionRecord, class_histogram
from errors import ImageGeometryError, ImageReadError, ManifestParseError, ManifestValidationError
from utils import derive_seed, format_bool, parse_bool, prepare_output_dir

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
RasterImage = Image.Image

BLACK = (0, 0, 0)


@dataclass(frozen=True)
class AugmentationConfig:
    shear_range_deg: float = DEFAULT_SHEAR_RANGE_DEG
    zoom_range: Tuple[float, float] = DEFAULT_ZOOM_RANGE
    shift_fraction: float = DEFAULT_SHIFT_FRACTION
    hflip_prob: float = DEFAULT_HFLIP_PROB
    vflip_prob: float = DEFAULT_VFLIP_PROB
    expansion_cap: int = DEFAULT_EXPANSION_CAP
    global_target_factor: float = DEFAULT_GLOBAL_TARGET_FACTOR
    seed: int = DEFAULT_SEED
    # when set, images are resized (aspect preserved) before augmentation
    resize_before_augment: Optional[int] = None

    def __post_init__(self):
        low, high = self.zoom_range
        if not 0 < low <= high:
            raise ValueError(f"zoom_range must be a positive interval, got {self.zoom_range}")
        for name in ("hflip_prob", "vflip_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.shear_range_deg < 0 or self.shift_fraction < 0:
            raise ValueError("shear_range_deg and shift_fraction must be non-negative")
        if self.expansion_cap < 1:
            raise ValueError(f"expansion_cap must be >= 1, got {self.expansion_cap}")
        if self.resize_before_augment is not None and self.resize_before_augment < 1:
            raise ValueError("resize_before_augment must be >= 1 when set")


@dataclass(frozen=True)
class AffineParams:
    shear_deg: float = 0.0
    zoom: float = 1.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    hflip: bool = False
    vflip: bool = False

    @property
    def is_geometric_identity(self) -> bool:
        return self.shear_deg == 0.0 and self.zoom == 1.0 and self.shift_x == 0.0 and self.shift_y == 0.0


IDENTITY = AffineParams()


@dataclass(frozen=True)
class AugmentedEntry:
    image_id: str
    copy_index: int
    params: AffineParams
    path: Path

    @property
    def output_id(self) -> str:
        return f"{self.image_id}_aug{self.copy_index}"


@dataclass(frozen=True)
class AugmentedManifest:
    entries: Tuple[AugmentedEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for entry in self.entries:
            key = (entry.image_id, entry.copy_index)
            if key in seen:
                raise ManifestValidationError(f"duplicate augmented entry {key}")
            if entry.copy_index == 0 and not entry.params == IDENTITY:
                raise ManifestValidationError(f"copy 0 of {entry.image_id} must be the untransformed original")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.entries)


def load_image(path: PathLike) -> RasterImage:
    """Reads an image as 8-bit RGB, raising ImageReadError naming the file."""
    path = Path(path)
    if not path.is_file():
        raise ImageReadError(path, "missing image")
    try:
        with Image.open(path) as img:
            img.load()
            return img.convert("RGB")
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise ImageReadError(path, f"unreadable or corrupt image ({e})") from e


def resize_preserve_aspect(img: RasterImage, target: int) -> RasterImage:
    """Scales the longest side to `target` and pads the rest with black.

    The content is centered; odd padding puts the extra pixel at the bottom
    (or right).
    """
    if target < 1:
        raise ImageGeometryError(f"target size must be >= 1, got {target}")
    width, height = img.size
    if width < 1 or height < 1:
        raise ImageGeometryError(f"degenerate image {width}x{height}")
    if (width, height) == (target, target):
        return img.copy()

    scale = target / max(width, height)
    new_w = max(1, min(target, round(width * scale)))
    new_h = max(1, min(target, round(height * scale)))
    content = img.resize((new_w, new_h), resample=Image.Resampling.BILINEAR)

    canvas = Image.new("RGB", (target, target), BLACK)
    canvas.paste(content, ((target - new_w) // 2, (target - new_h) // 2))
    return canvas


def content_box(original_size: Tuple[int, int], target: int) -> Tuple[int, int, int, int]:
    """(left, top, width, height) of the content region resize_preserve_aspect produces."""
    width, height = original_size
    if (width, height) == (target, target):
        return 0, 0, target, target
    scale = target / max(width, height)
    new_w = max(1, min(target, round(width * scale)))
    new_h = max(1, min(target, round(height * scale)))
    return (target - new_w) // 2, (target - new_h) // 2, new_w, new_h


def sample_affine_params(cfg: AugmentationConfig, image_id: str, copy_index: int,
                         image_size: Tuple[int, int]) -> AffineParams:
    """Draws one transform from the configured ranges.

    The stream is seeded by (cfg.seed, image_id, copy_index) only, so the draw
    does not depend on iteration order or worker count. Shifts are in pixels of
    the given (width, height).
    """
    if copy_index < 1:
        raise ValueError("copy_index 0 is reserved for the untransformed original")
    width, height = image_size
    rng = np.random.default_rng(derive_seed(cfg.seed, image_id, copy_index))
    shear = float(rng.uniform(-cfg.shear_range_deg, cfg.shear_range_deg))
    zoom = float(rng.uniform(cfg.zoom_range[0], cfg.zoom_range[1]))
    max_dx = cfg.shift_fraction * width
    max_dy = cfg.shift_fraction * height
    shift_x = float(rng.uniform(-max_dx, max_dx))
    shift_y = float(rng.uniform(-max_dy, max_dy))
    hflip = bool(rng.random() < cfg.hflip_prob)
    vflip = bool(rng.random() < cfg.vflip_prob)
    # uniform(-0, 0) yields -0.0; keep the identity transform clean
    return AffineParams(shear + 0.0, zoom, shift_x + 0.0, shift_y + 0.0, hflip, vflip)


def _forward_matrix(p: AffineParams, width: int, height: int) -> np.ndarray:
    cx, cy = width / 2.0, height / 2.0
    to_center = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    from_center = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    shear = np.array([[1.0, math.tan(math.radians(p.shear_deg)), 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    zoom = np.diag([p.zoom, p.zoom, 1.0])
    shift = np.array([[1.0, 0.0, p.shift_x], [0.0, 1.0, p.shift_y], [0.0, 0.0, 1.0]])
    # flips are applied to the raster first; then shear, zoom about center, shift
    return shift @ from_center @ zoom @ shear @ to_center


def apply_affine(img: RasterImage, p: AffineParams) -> RasterImage:
    """Applies flips, shear, zoom about the center and shift, in that order.

    Output keeps the input size; uncovered regions are black; sampling is
    bilinear. The identity transform returns an exact copy.
    """
    out = img.copy()
    if p.hflip:
        out = ImageOps.mirror(out)
    if p.vflip:
        out = ImageOps.flip(out)
    if p.is_geometric_identity:
        return out

    width, height = out.size
    inverse = np.linalg.inv(_forward_matrix(p, width, height))
    coeffs = tuple(float(v) for v in inverse[:2].ravel())
    return out.transform(
        (width, height),
        Image.Transform.AFFINE,
        coeffs,
        resample=Image.Resampling.BILINEAR,
        fillcolor=BLACK,
    )


def plan_expansion(class_counts: Mapping[Hashable, int], cfg: AugmentationConfig) -> Dict[Hashable, int]:
    """Returns, per class, how many images each source image yields (original included).

    Base multipliers round(n_max / n_c) rebalance the classes; they are then
    scaled by the smallest integer factor whose (capped) total reaches
    global_target_factor times the input size. Every multiplier stays within
    [1, expansion_cap].
    """
    counts = {c: int(n) for c, n in class_counts.items()}
    if not counts:
        return {}
    for cls, n in counts.items():
        if n < 1:
            raise ManifestValidationError(f"class {cls} has no records to expand")

    n_max = max(counts.values())
    cap = cfg.expansion_cap
    base = {c: min(max(round(n_max / n), 1), cap) for c, n in counts.items()}
    target = cfg.global_target_factor * sum(counts.values())

    factor = 1
    while True:
        plan = {c: min(base[c] * factor, cap) for c in counts}
        total = sum(counts[c] * plan[c] for c in counts)
        if total >= target or all(m == cap for m in plan.values()):
            break
        factor += 1
    logger.info(f"[AUGMENT] Expansion plan (scaling x{factor}): {plan}, {sum(counts.values())} -> {total} images")
    return plan


def _expand_record(record: LesionRecord, copies: int, cfg: AugmentationConfig,
                   image_dir: Path) -> List[AugmentedEntry]:
    img = load_image(record.image_path)
    if cfg.resize_before_augment is not None:
        img = resize_preserve_aspect(img, cfg.resize_before_augment)

    entries = []
    original_path = image_dir / f"{record.image_id}_aug0.png"
    img.save(original_path, format="PNG")
    entries.append(AugmentedEntry(record.image_id, 0, IDENTITY, original_path))
    for copy_index in range(1, copies):
        params = sample_affine_params(cfg, record.image_id, copy_index, img.size)
        out_path = image_dir / f"{record.image_id}_aug{copy_index}.png"
        apply_affine(img, params).save(out_path, format="PNG")
        entries.append(AugmentedEntry(record.image_id, copy_index, params, out_path))
    return entries


def expand_dataset(train: DatasetManifest, cfg: AugmentationConfig, out_dir: PathLike,
                   overwrite: bool = False, workers: int = 1) -> AugmentedManifest:
    """Materializes originals plus planned augmented copies under out_dir.

    Writes out_dir/images/{image_id}_aug{k}.png and out_dir/augmented.csv.
    The output is a pure function of (train, cfg) for any worker count.
    """
    out_dir = prepare_output_dir(out_dir, overwrite=overwrite)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    counts = {d: n for d, n in class_histogram(train).items() if n > 0}
    plan = plan_expansion(counts, cfg)

    def work(record: LesionRecord) -> List[AugmentedEntry]:
        return _expand_record(record, plan[record.diagnosis], cfg, image_dir)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, train.records))
    else:
        results = [work(record) for record in train.records]

    manifest = AugmentedManifest(tuple(e for batch in results for e in batch))
    expected = sum(plan[r.diagnosis] for r in train)
    if len(manifest) != expected:
        raise ManifestValidationError(f"expansion produced {len(manifest)} images, plan called for {expected}")
    write_augmented_manifest(manifest, out_dir / AUGMENTED_MANIFEST_CSV)
    logger.info(f"[AUGMENT] Wrote {len(manifest)} images for {len(train)} sources to {out_dir}")
    return manifest


def write_augmented_manifest(manifest: AugmentedManifest, path: PathLike) -> Path:
    path = Path(path)
    rows = [
        {
            "image_id": e.image_id,
            "copy_index": e.copy_index,
            "shear_deg": repr(e.params.shear_deg),
            "zoom": repr(e.params.zoom),
            "shift_x": repr(e.params.shift_x),
            "shift_y": repr(e.params.shift_y),
            "hflip": format_bool(e.params.hflip),
            "vflip": format_bool(e.params.vflip),
            "path": str(e.path),
        }
        for e in manifest.entries
    ]
    pd.DataFrame(rows, columns=AUGMENTED_MANIFEST_HEADER).to_csv(path, index=False)
    return path


def read_augmented_manifest(path: PathLike) -> AugmentedManifest:
    path = Path(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in AUGMENTED_MANIFEST_HEADER if c not in frame.columns]
    if missing:
        raise ManifestParseError(f"{path}: missing columns {', '.join(missing)}", line=1)
    entries = []
    for offset, row in enumerate(frame.itertuples(index=False)):
        try:
            params = AffineParams(
                float(row.shear_deg), float(row.zoom), float(row.shift_x), float(row.shift_y),
                parse_bool(row.hflip), parse_bool(row.vflip),
            )
            entries.append(AugmentedEntry(row.image_id, int(row.copy_index), params, Path(row.path)))
        except ValueError as e:
            raise ManifestParseError(f"{path}: {e}", line=offset + 2) from e
    return AugmentedManifest(tuple(entries))


def augmented_to_dataset_manifest(augmented: AugmentedManifest, source: DatasetManifest) -> DatasetManifest:
    """Turns augmented outputs into a trainable manifest carrying source diagnoses."""
    by_id = source.by_id()
    records = []
    for entry in augmented.entries:
        if entry.image_id not in by_id:
            raise ManifestValidationError(f"augmented image {entry.output_id} has no source record")
        records.append(LesionRecord(entry.output_id, Path(entry.path), by_id[entry.image_id].diagnosis))
    return DatasetManifest(tuple(records), source_tag=f"{source.source_tag}#augmented")


def random_crop(img: RasterImage, rng: np.random.Generator, size: int = 224) -> RasterImage:
    """Crops a size x size window at offsets drawn uniformly from the slack."""
    width, height = img.size
    if width < size or height < size:
        raise ImageGeometryError(f"cannot crop {size}x{size} from {width}x{height}")
    left = int(rng.integers(0, width - size + 1))
    top = int(rng.integers(0, height - size + 1))
    return img.crop((left, top, left + size, top + size))


def center_crop(img: RasterImage, size: int) -> RasterImage:
    width, height = img.size
    if width < size or height < size:
        raise ImageGeometryError(f"cannot crop {size}x{size} from {width}x{height}")
    left = (width - size) // 2
    top = (height - size) // 2
    return img.crop((left, top, left + size, top + size))


def five_crop_views(img: RasterImage, size: int) -> List[RasterImage]:
    """Four corner crops plus the center crop."""
    width, height = img.size
    if width < size or height < size:
        raise ImageGeometryError(f"cannot crop {size}x{size} from {width}x{height}")
    corners = [(0, 0), (width - size, 0), (0, height - size), (width - size, height - size)]
    views = [img.crop((x, y, x + size, y + size)) for x, y in corners]
    views.append(center_crop(img, size))
    return views


def prepare_for_model(img: RasterImage, spec, rng: Optional[np.random.Generator] = None) -> RasterImage:
    """Brings an image to a backbone's input geometry.

    Specs with random_crop_from are resized to that size, then cropped at random
    (training, rng given) or at the center (inference, rng None).
    """
    crop_from = getattr(spec, "random_crop_from", None)
    if crop_from:
        resized = resize_preserve_aspect(img, crop_from)
        if rng is not None:
            return random_crop(resized, rng, spec.input_size)
        return center_crop(resized, spec.input_size)
    return resize_preserve_aspect(img, spec.input_size)


def prepare_views(img: RasterImage, spec, n_crops: int = 1) -> Sequence[RasterImage]:
    """Inference views: the deterministic center view, or five crops when requested."""
    crop_from = getattr(spec, "random_crop_from", None)
    if n_crops == 5 and crop_from:
        return five_crop_views(resize_preserve_aspect(img, crop_from), spec.input_size)
    if n_crops not in (1, 5):
        raise ValueError(f"n_crops must be 1 or 5, got {n_crops}")
    return [prepare_for_model(img, spec)]
