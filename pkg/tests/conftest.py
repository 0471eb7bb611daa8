"""Shared fixtures: tiny images, manifests and an isolated output root."""

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from dataset import DatasetManifest, Diagnosis, LesionRecord
from synthetic import SYNTHETIC_EXTENSION, generate_synthetic_dataset


@pytest.fixture(autouse=True)
def isolated_output_root(tmp_path, monkeypatch):
    root = tmp_path / "output_root"
    monkeypatch.setenv("LESION_OUTPUT_ROOT", str(root))
    return root


@pytest.fixture
def write_image(tmp_path):
    """Writes a seeded random RGB image and returns its path."""

    def _write(name: str, size=(32, 24), seed: int = 0, directory: Path = None) -> Path:
        directory = directory or tmp_path / "images"
        directory.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(seed)
        pixels = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
        path = directory / name
        Image.fromarray(pixels, mode="RGB").save(path)
        return path

    return _write


@pytest.fixture
def ground_truth_csv(tmp_path):
    """Writes a ground-truth CSV from (image_id, melanoma, sk) rows."""

    def _write(rows, name: str = "gt.csv", header: str = "image_id,melanoma,seborrheic_keratosis") -> Path:
        path = tmp_path / name
        lines = [header] + [",".join(str(c) for c in row) for row in rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return _write


@pytest.fixture
def make_manifest():
    """Builds an in-memory manifest with the given per-class counts."""

    def _make(melanoma: int = 0, sk: int = 0, nevus: int = 0, root: Path = Path("/nonexistent")) -> DatasetManifest:
        records = []
        for diagnosis, count in ((Diagnosis.MELANOMA, melanoma),
                                 (Diagnosis.SEBORRHEIC_KERATOSIS, sk),
                                 (Diagnosis.NEVUS, nevus)):
            for i in range(count):
                image_id = f"ISIC_{diagnosis.value[:3]}{i:04d}"
                records.append(LesionRecord(image_id, root / f"{image_id}.jpg", diagnosis))
        return DatasetManifest(tuple(records), source_tag="fixture")

    return _make


@pytest.fixture
def synthetic_data(tmp_path):
    """30 tiny synthetic lesions: (ground-truth CSV, image root, extension)."""
    csv_path = generate_synthetic_dataset(tmp_path / "synthetic", n_images=30, image_size=32, seed=3)
    return csv_path, tmp_path / "synthetic" / "images", SYNTHETIC_EXTENSION
