"""Synthetic lesion images for desk-scale pipeline runs."""

import logging
from pathlib import Path
from typing import Dict, Union

import numpy as np
import pandas as pd
from PIL import Image

from config import GROUND_TRUTH_HEADER, SYNTHETIC_CLASS_MIX, SYNTHETIC_IMAGE_COUNT, SYNTHETIC_IMAGE_SIZE
from dataset import Diagnosis
from utils import derive_seed

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SYNTHETIC_EXTENSION = ".png"
SYNTHETIC_CSV = "ground_truth.csv"
SKIN_TONE = np.array([224.0, 172.0, 140.0])
# lesion base colour per class
LESION_TONES: Dict[Diagnosis, np.ndarray] = {
    Diagnosis.MELANOMA: np.array([60.0, 35.0, 30.0]),
    Diagnosis.SEBORRHEIC_KERATOSIS: np.array([250.0, 235.0, 200.0]),
    Diagnosis.NEVUS: np.array([175.0, 125.0, 95.0]),
}


def class_counts(n_images: int) -> Dict[Diagnosis, int]:
    """Class sizes for the synthetic mix; rounding slack goes to Nevus."""
    counts = {Diagnosis(name): int(round(share * n_images)) for name, share in SYNTHETIC_CLASS_MIX.items()}
    counts[Diagnosis.NEVUS] += n_images - sum(counts.values())
    return counts


def render_lesion(diagnosis: Diagnosis, image_size: int, rng: np.random.Generator) -> Image.Image:
    """Noisy skin background with one elliptical blob in the class's tone."""
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    cx, cy = rng.uniform(0.35, 0.65, size=2) * image_size
    rx, ry = rng.uniform(0.2, 0.32, size=2) * image_size
    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0

    pixels = np.empty((image_size, image_size, 3))
    pixels[:] = SKIN_TONE + rng.normal(0.0, 6.0, size=3)
    pixels[inside] = LESION_TONES[diagnosis] + rng.normal(0.0, 8.0, size=3)
    pixels += rng.normal(0.0, 10.0, size=pixels.shape)
    return Image.fromarray(np.clip(pixels, 0, 255).astype(np.uint8), mode="RGB")


def generate_synthetic_dataset(out_dir: PathLike, n_images: int = SYNTHETIC_IMAGE_COUNT,
                               image_size: int = SYNTHETIC_IMAGE_SIZE, seed: int = 0) -> Path:
    """Writes images/ and ground_truth.csv under out_dir; returns the CSV path.

    Images are .png; load the manifest with extension=".png".
    """
    if n_images < len(Diagnosis):
        raise ValueError(f"need at least {len(Diagnosis)} images, got {n_images}")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    labels = [d for d, n in class_counts(n_images).items() for _ in range(n)]
    order = np.random.default_rng(derive_seed(seed, "synthetic", "order")).permutation(len(labels))

    rows = []
    for index, position in enumerate(order):
        diagnosis = labels[position]
        image_id = f"SYN_{index:07d}"
        rng = np.random.default_rng(derive_seed(seed, "synthetic", image_id))
        render_lesion(diagnosis, image_size, rng).save(image_dir / f"{image_id}{SYNTHETIC_EXTENSION}")
        rows.append({
            "image_id": image_id,
            "melanoma": f"{float(diagnosis is Diagnosis.MELANOMA):.1f}",
            "seborrheic_keratosis": f"{float(diagnosis is Diagnosis.SEBORRHEIC_KERATOSIS):.1f}",
        })

    csv_path = out_dir / SYNTHETIC_CSV
    pd.DataFrame(rows, columns=GROUND_TRUTH_HEADER).to_csv(csv_path, index=False)
    logger.info(f"Generated {n_images} synthetic {image_size}px lesions in {out_dir}")
    return csv_path
