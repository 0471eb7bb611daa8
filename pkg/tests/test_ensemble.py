from itertools import permutations

import numpy as np
import pytest
import torch

from dataset import Task, derive_task_manifest, load_manifest
from ensemble import (
    ENSEMBLE_SOURCE,
    PredictionSet,
    ensemble_mean,
    predict_dataset,
    read_prediction_csv,
    threshold_decision,
    write_prediction_csv,
)
from errors import ManifestParseError, PredictionMismatchError
from models import Architecture, BackboneSpec, build_model, classifier_layer


def _pset(entries, task=Task.MELANOMA, source="m"):
    return PredictionSet(task, {k: np.array(v, dtype=np.float64) for k, v in entries.items()}, source=source)


def _random_sets(rng, n_sets, n_images):
    sets = []
    for s in range(n_sets):
        p = rng.random(n_images)
        sets.append(_pset({f"img{i}": [p[i], 1.0 - p[i]] for i in range(n_images)}, source=f"m{s}"))
    return sets


class TestEnsembleMean:
    def test_worked_example(self):
        fused = ensemble_mean([
            _pset({"x": [0.8, 0.2]}),
            _pset({"x": [0.6, 0.4]}),
            _pset({"x": [0.4, 0.6]}),
        ])
        assert fused.entries["x"].tolist() == [0.6, 0.4]
        assert threshold_decision(fused.entries["x"]) == 1
        assert fused.source == ENSEMBLE_SOURCE

    def test_documented_triple_in_every_order(self):
        members = [_pset({"x": [0.9, 0.1]}), _pset({"x": [0.6, 0.4]}), _pset({"x": [0.3, 0.7]})]
        for order in permutations(members):
            fused = ensemble_mean(list(order))
            assert fused.entries["x"].tolist() == [0.6, 0.4]
            assert threshold_decision(fused.entries["x"]) == 1

    def test_permutation_invariance_is_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            sets = _random_sets(rng, 3, 2)
            reference = ensemble_mean(sets)
            for order in permutations(sets):
                fused = ensemble_mean(list(order))
                for image_id, probs in reference.entries.items():
                    assert np.array_equal(fused.entries[image_id], probs)

    def test_convex_and_normalized(self):
        rng = np.random.default_rng(1)
        sets = _random_sets(rng, 4, 200)
        fused = ensemble_mean(sets)
        for image_id, probs in fused.entries.items():
            stacked = np.stack([s.entries[image_id] for s in sets])
            assert np.all(stacked.min(axis=0) <= probs)
            assert np.all(probs <= stacked.max(axis=0))
            np.testing.assert_allclose(probs.sum(), 1.0, rtol=0, atol=1e-12)

    def test_single_set_is_identity(self):
        only = _pset({"a": [0.3, 0.7], "b": [0.9, 0.1]})
        fused = ensemble_mean([only])
        assert all(np.array_equal(fused.entries[k], only.entries[k]) for k in only.entries)

    def test_identical_copies_unchanged(self):
        rng = np.random.default_rng(2)
        base = _random_sets(rng, 1, 50)[0]
        fused = ensemble_mean([base, base, base])
        for k in base.entries:
            np.testing.assert_array_equal(fused.entries[k], base.entries[k])

    def test_id_mismatch(self):
        with pytest.raises(PredictionMismatchError):
            ensemble_mean([_pset({"a": [0.5, 0.5]}), _pset({"b": [0.5, 0.5]})])

    def test_task_mismatch(self):
        with pytest.raises(PredictionMismatchError):
            ensemble_mean([_pset({"a": [0.5, 0.5]}), _pset({"a": [0.5, 0.5]}, task=Task.SEBORRHEIC_KERATOSIS)])

    def test_empty(self):
        with pytest.raises(PredictionMismatchError):
            ensemble_mean([])


class TestThresholdDecision:
    def test_examples(self):
        assert threshold_decision(np.array([0.6, 0.4])) == 1
        assert threshold_decision(np.array([0.49, 0.51])) == 0

    def test_boundary_is_inclusive(self):
        assert threshold_decision(np.array([0.5, 0.5])) == 1
        assert threshold_decision(np.array([0.3, 0.7]), threshold=0.3) == 1


def test_unnormalized_vector_rejected():
    with pytest.raises(PredictionMismatchError):
        _pset({"a": [0.6, 0.6]})


class TestPredictionCsv:
    def test_write_and_read(self, tmp_path):
        pred = _pset({"ISIC_0000001": [0.123456789, 0.876543211], "ISIC_0000002": [1.0, 0.0]})
        path = write_prediction_csv(pred, tmp_path / "out" / "pred.csv")
        assert path.read_text().splitlines() == [
            "image_id,score",
            "ISIC_0000001,0.123457",
            "ISIC_0000002,1.000000",
        ]
        reloaded = read_prediction_csv(path, "melanoma")
        assert reloaded.source == "pred"
        assert reloaded.scores() == {"ISIC_0000001": 0.123457, "ISIC_0000002": 1.0}
        assert reloaded.entries["ISIC_0000002"].tolist() == [1.0, 0.0]

    def test_score_out_of_range(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("image_id,score\na,0.5\nb,1.5\n")
        with pytest.raises(ManifestParseError) as info:
            read_prediction_csv(path, "melanoma")
        assert info.value.line == 3

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,prob\na,0.5\n")
        with pytest.raises(ManifestParseError):
            read_prediction_csv(path, "sk")


def test_predict_dataset_covers_manifest(synthetic_data):
    csv_path, image_root, extension = synthetic_data
    manifest = derive_task_manifest(load_manifest(csv_path, image_root, extension), "sk")
    model = build_model(BackboneSpec(Architecture.TINY, 16, random_crop_from=20), init_seed=0)
    single = predict_dataset(model, manifest)
    five = predict_dataset(model, manifest, n_crops=5)
    assert set(single.entries) == {r.image_id for r in manifest}
    assert single.task is Task.SEBORRHEIC_KERATOSIS
    assert single.source == "TinySurrogate"
    assert set(five.entries) == set(single.entries)


def test_zero_head_predicts_uniform(synthetic_data):
    csv_path, image_root, extension = synthetic_data
    manifest = derive_task_manifest(load_manifest(csv_path, image_root, extension), "melanoma")
    model = build_model(BackboneSpec(Architecture.TINY, 16), init_seed=0)
    with torch.no_grad():
        classifier_layer(model).weight.zero_()
        classifier_layer(model).bias.zero_()
    pred = predict_dataset(model, manifest)
    for probs in pred.entries.values():
        assert probs.tolist() == [0.5, 0.5]
    assert set(pred.scores().values()) == {0.5}
