from dataclasses import replace

import pytest

from db import RunRegistry
from errors import ConfigError, OutputCollisionError
from experiments import (
    ExperimentConfig,
    default_replay_dir,
    load_config,
    parse_config,
    plans_for,
    preset_config,
    preset_models,
    replay_run,
    run_experiment,
    save_config,
    serialize_config,
    surrogate_schedule,
    train_experiment,
    validate_config,
)
from models import Architecture
from training import lr_at_epoch, make_paper_schedule


class TestConfigFile:
    def test_serialize_then_parse(self):
        config = ExperimentConfig(task="sk", models=["sk_alexnet350"], split_fraction=0.25, augment=False,
                                  aug_zoom_min=0.9, surrogate=True, workers=2)
        assert parse_config(serialize_config(config)) == config

    def test_comments_and_defaults(self):
        config = parse_config("# header\n\ntask = sk\nthreshold = 0.4\n")
        assert config.task == "sk"
        assert config.threshold == 0.4
        assert config.model_names() == ["sk_alexnet350"]

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigError) as info:
            parse_config("task = melanoma\nlearning_rate = 0.1\n")
        assert info.value.line == 2

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("task = sk\ntask = melanoma\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError) as info:
            parse_config("augment = maybe\n")
        assert info.value.line == 1

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_config("task melanoma\n")

    def test_model_from_other_task(self):
        with pytest.raises(ConfigError, match="belongs to task"):
            parse_config("task = sk\nmodels = mel_alexnet224\n")

    def test_file_round_trip(self, tmp_path):
        config = preset_config("melanoma", "gt.csv", "images")
        path = save_config(config, tmp_path / "cfg" / "experiment.cfg")
        assert load_config(path) == config

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.cfg")

    def test_paths_checked_on_validate(self, tmp_path):
        config = ExperimentConfig(ground_truth_csv=str(tmp_path / "none.csv"), image_root=str(tmp_path))
        with pytest.raises(ConfigError, match="ground_truth_csv"):
            validate_config(config)
        validate_config(config, check_paths=False)

    def test_default_output_dir_under_root(self, isolated_output_root):
        assert ExperimentConfig(task="sk").resolved_output_dir() == isolated_output_root / "sk_experiment"


class TestPresets:
    def test_melanoma_recipe_is_three_networks(self):
        plans = preset_models(preset_config("melanoma").model_names())
        assert [p.name for p in plans] == ["mel_googlenet256", "mel_googlenet224", "mel_alexnet224"]
        assert [(p.spec.architecture_id, p.spec.input_size, p.spec.random_crop_from) for p in plans] == [
            (Architecture.GOOGLENET, 224, 256),
            (Architecture.GOOGLENET, 224, None),
            (Architecture.ALEXNET, 224, None),
        ]
        assert [p.schedule.total_epochs for p in plans] == [72, 50, 30]

    def test_sk_recipe(self):
        (plan,) = preset_models(["sk_alexnet350"])
        assert (plan.spec.architecture_id, plan.spec.input_size) == (Architecture.ALEXNET, 350)
        assert plan.schedule.schedule_id == "SK_AlexNet350"

    def test_surrogate_geometry(self):
        plans = preset_models(["sk_alexnet350", "mel_googlenet256", "mel_googlenet224"], surrogate=True)
        assert all(p.spec.architecture_id is Architecture.TINY for p in plans)
        assert [(p.spec.input_size, p.spec.random_crop_from) for p in plans] == [(44, None), (28, 32), (28, None)]
        assert all(p.schedule.total_epochs == 9 for p in plans)

    def test_pretrained_weights_picked_up(self, tmp_path):
        (tmp_path / "AlexNetStyle.pth").write_bytes(b"")
        (alex,) = preset_models(["mel_alexnet224"], pretrained_dir=str(tmp_path))
        (google,) = preset_models(["mel_googlenet224"], pretrained_dir=str(tmp_path))
        assert alex.spec.pretrained_ref == str(tmp_path / "AlexNetStyle.pth")
        assert google.spec.pretrained_ref is None

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset_models(["vgg16"])


class TestSurrogateSchedule:
    def test_three_stage_rescale(self):
        schedule = surrogate_schedule(make_paper_schedule("SK_AlexNet350"), 6, 0.05)
        rates = [lr_at_epoch(schedule, e) for e in range(6)]
        assert rates == pytest.approx([0.05, 0.05, 0.005, 0.005, 0.0005, 0.0005])

    def test_halving_ratios_kept(self):
        schedule = surrogate_schedule(make_paper_schedule("Mel_GoogleNet224"), 6, 0.05)
        rates = [s.learning_rate for s in schedule.stages]
        assert rates == pytest.approx([0.05, 0.025, 0.0125, 0.00625, 0.003125])
        assert schedule.stages[-1].end == 6

    def test_too_few_epochs_stretched_to_stage_count(self):
        schedule = surrogate_schedule(make_paper_schedule("Mel_GoogleNet224"), 2, 0.05)
        assert schedule.total_epochs == 5


@pytest.fixture
def sk_config(synthetic_data, tmp_path):
    csv_path, image_root, extension = synthetic_data
    return preset_config(
        "sk", str(csv_path), str(image_root), surrogate=True,
        image_extension=extension, output_dir=str(tmp_path / "experiment"),
        aug_target_factor=2.0, surrogate_epochs=3, batch_size=8,
    )


class TestPipeline:
    def test_run_experiment_layout(self, sk_config, tmp_path):
        registry = RunRegistry(tmp_path / "runs.db")
        result = run_experiment(sk_config, registry=registry)
        root = result.output_dir
        assert (root / "experiment.cfg").is_file()
        assert (root / "split" / "split.meta").is_file()
        assert (root / "augmented" / "augmented.csv").is_file()
        assert (root / "runs" / "sk_alexnet350" / "metrics.csv").is_file()
        assert (root / "report" / "report.txt").is_file()
        assert set(result.prediction_paths) == {"sk_alexnet350", "ensemble"}
        assert result.report.n_images == len(result.split.validation)
        assert registry.get_run("sk_alexnet350")["selected_epoch"] == result.records[0].selected_epoch
        assert len(registry.list_evaluations()) == 1

    def test_existing_output_refused(self, sk_config):
        run_experiment(replace(sk_config, augment=False))
        with pytest.raises(OutputCollisionError):
            run_experiment(replace(sk_config, augment=False))

    def test_replay_reproduces_metrics(self, sk_config, tmp_path):
        (record,) = train_experiment(sk_config)
        replayed = replay_run(record.run_dir, sk_config, tmp_path / "replay")
        assert replayed.metrics == record.metrics
        assert replayed.selected_epoch == record.selected_epoch

    def test_replay_defaults_next_to_experiment(self, sk_config, tmp_path):
        (record,) = train_experiment(sk_config)
        target = default_replay_dir(record.run_dir, sk_config)
        assert target == tmp_path / "sk_alexnet350_replay"
        assert replay_run(record.run_dir, sk_config, target).metrics == record.metrics
        assert (record.run_dir / "metrics.csv").is_file()

    def test_replay_never_clobbers_its_source(self, sk_config):
        (record,) = train_experiment(sk_config)
        for target in (record.run_dir, sk_config.resolved_output_dir()):
            with pytest.raises(ConfigError):
                replay_run(record.run_dir, sk_config, target, overwrite=True)
        assert (record.run_dir / "metrics.csv").is_file()

    def test_plans_follow_config(self, sk_config):
        (plan,) = plans_for(sk_config)
        assert plan.schedule.total_epochs == 3
        assert plan.schedule.batch_size == 8
