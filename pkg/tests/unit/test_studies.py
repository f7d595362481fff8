"""Unit tests for the experiment protocols and StudyRunner."""

import numpy as np
import pytest

from ce_vae.exceptions import ConfigurationError, DatasetError, TrainingAbortedError
from ce_vae.models import ExperimentPlan
from ce_vae.studies import (
    StudyRunner,
    cross_eval,
    generate_scenario,
    pretrain_finetune,
    training_size_study,
    width_study,
)
from ce_vae.vae import build_architecture


def fake_train(train, val, config, model=None):
    """Stand-in for train_model: an untrained model with zeroed heads."""
    if model is not None:
        return model
    return build_architecture(config.model_copy(update={"zero_init_heads": True}))


@pytest.fixture
def mock_train(mocker):
    return mocker.patch("ce_vae.studies.train_model", side_effect=fake_train)


@pytest.fixture
def plan(tiny_config):
    return ExperimentPlan(
        estimators=["vae", "ls", "lmmse"],
        snr_grid=[0.0, 10.0],
        scenarios=["A", "B"],
        train_count=24,
        val_count=8,
        test_count=10,
        training_sizes=[5, 10],
        finetune_sizes=[0, 5],
        data_seed=0,
        vae=tiny_config,
    )


@pytest.fixture
def scenario_a(tiny_config):
    return generate_scenario("A", tiny_config, {"train": 24, "val": 8, "test": 10}, seed=0)


class TestGenerateScenario:
    """Test scenario data generation."""

    def test_splits_are_normalized(self, scenario_a):
        assert (scenario_a.train.count, scenario_a.val.count, scenario_a.test.count) == (24, 8, 10)
        for split in (scenario_a.train, scenario_a.val, scenario_a.test):
            assert split.normalized
            assert split.mean_power() == pytest.approx(1.0)
        assert scenario_a.covariance is None

    def test_gaussian_family_carries_covariance(self, tiny_config):
        data = generate_scenario("G", tiny_config, {"train": 4, "val": 2, "test": 3})

        assert data.covariance.shape == (16, 16)
        np.testing.assert_allclose(data.covariance, data.covariance.conj().T)


class TestProtocols:
    """Test the study functions with training mocked out."""

    def test_training_size_uses_nested_prefixes(self, mock_train, scenario_a, tiny_config):
        records = training_size_study(scenario_a, [5, 10], tiny_config, 20.0, noise_seed=1)

        sizes = [call.args[0].count for call in mock_train.call_args_list]
        assert sizes == [5, 10]
        np.testing.assert_array_equal(
            mock_train.call_args_list[0].args[0].samples, scenario_a.train.samples[:5]
        )
        assert [r.extras["training_size"] for r in records] == ["5", "10"]
        assert all(r.snr_db == 20.0 and r.estimator == "vae" for r in records)

    def test_training_size_rejects_unsorted(self, mock_train, scenario_a, tiny_config):
        with pytest.raises(DatasetError):
            training_size_study(scenario_a, [10, 5], tiny_config, 20.0, noise_seed=1)

    def test_pretrain_finetune_arms(self, mock_train, scenario_a, tiny_config):
        pretrained = fake_train(None, None, tiny_config)

        records = pretrain_finetune(
            pretrained, scenario_a, [0, 5], tiny_config, [0.0, 10.0], noise_seed=1
        )

        arms = [(r.extras["arm"], r.extras["finetune_size"]) for r in records]
        assert sorted(set(arms)) == [
            ("finetune", "0"),
            ("finetune", "5"),
            ("full", "24"),
            ("scratch", "5"),
            ("zero-shot", "0"),
        ]
        assert len(records) == 10
        tuned_from = mock_train.call_args_list[0].kwargs["model"]
        assert tuned_from is not pretrained
        zero_shot = [r for r in records if r.extras["arm"] == "zero-shot"]
        assert all(r.extras["pretrained_on"] == "B" for r in zero_shot)

    def test_pretrain_finetune_without_zero_shot(self, mock_train, scenario_a, tiny_config):
        pretrained = fake_train(None, None, tiny_config)

        records = pretrain_finetune(
            pretrained,
            scenario_a,
            [0],
            tiny_config,
            [10.0],
            noise_seed=1,
            include_full=False,
            include_zero_shot=False,
        )

        assert [r.extras["arm"] for r in records] == ["finetune"]
        mock_train.assert_not_called()

    def test_width_study(self, mock_train, scenario_a, tiny_config):
        records = width_study(scenario_a, [4, 8], tiny_config, [10.0, 20.0], noise_seed=1)

        trained = [call.args[2].base_channels for call in mock_train.call_args_list]
        assert trained == [4, 8]
        assert len(records) == 4
        assert {r.snr_db for r in records} == {10.0, 20.0}
        wide = build_architecture(tiny_config.model_copy(update={"base_channels": 8}))
        counts = {r.extras["base_channels"]: r.extras["param_count"] for r in records}
        assert counts["8"] == str(wide.parameter_count())
        assert int(counts["4"]) < int(counts["8"])

    def test_cross_eval_adds_ls_reference(self, scenario_a, tiny_config):
        model = fake_train(None, None, tiny_config)

        records = cross_eval(model, scenario_a.test, [0.0], noise_seed=1, trained_on="B")

        assert sorted(r.estimator for r in records) == ["ls", "vae"]
        assert all(r.extras == {"trained_on": "B"} for r in records)


class TestStudyRunner:
    """Test plan orchestration and failure handling."""

    def test_sweep(self, mock_train, plan):
        with StudyRunner(plan) as runner:
            records = runner.run("sweep")

        assert {r.estimator for r in records} == {"vae", "ls", "lmmse"}
        assert len(records) == 6
        assert runner.failures == []
        assert runner._data == {}

    def test_data_is_cached(self, plan):
        runner = StudyRunner(plan)

        assert runner.data("A") is runner.data("A")

    def test_cross(self, mock_train, plan):
        records = StudyRunner(plan).run("cross")

        assert mock_train.call_count == 2
        cells = {(r.extras["trained_on"], r.scenario) for r in records}
        assert cells == {("A", "A"), ("A", "B"), ("B", "A"), ("B", "B")}

    def test_size(self, mock_train, plan):
        records = StudyRunner(plan).run("size")

        assert [r.extras["training_size"] for r in records] == ["5", "10"]

    def test_pretrain(self, mock_train, plan):
        records = StudyRunner(plan).run("pretrain")

        assert {r.extras["arm"] for r in records} == {"zero-shot", "finetune", "scratch", "full"}
        assert len(records) == 10

    def test_failed_finetune_size_keeps_other_arms(self, mocker, plan):
        def flaky_train(train, val, config, model=None):
            if train.count == 5:
                raise TrainingAbortedError("loss is nan", epoch=1, batch=0)
            return fake_train(train, val, config, model)

        mocker.patch("ce_vae.studies.train_model", side_effect=flaky_train)
        runner = StudyRunner(plan, continue_on_failure=True)

        records = runner.run("pretrain")

        arms = {(r.extras["arm"], r.extras["finetune_size"]) for r in records}
        assert arms == {("zero-shot", "0"), ("finetune", "0"), ("full", "24")}
        assert len(records) == 6
        assert runner.failures == ["finetune-5: loss is nan"]

    def test_width(self, mocker, plan):
        def narrow_only(train, val, config, model=None):
            if config.base_channels > 4:
                raise TrainingAbortedError("loss is nan", epoch=1, batch=0)
            return fake_train(train, val, config, model)

        mocker.patch("ce_vae.studies.train_model", side_effect=narrow_only)
        plan = plan.model_copy(update={"widths": [4, 8], "width_snr_grid": [10.0]})
        runner = StudyRunner(plan, continue_on_failure=True)

        records = runner.run("width")

        assert [r.extras["base_channels"] for r in records] == ["4"]
        assert runner.failures == ["width-8: loss is nan"]

    def test_failed_arm_is_recorded(self, mocker, plan):
        mocker.patch(
            "ce_vae.studies.train_model",
            side_effect=TrainingAbortedError("loss is nan", epoch=1, batch=0),
        )
        runner = StudyRunner(plan, continue_on_failure=True)

        records = runner.run("sweep")

        assert {r.estimator for r in records} == {"ls", "lmmse"}
        assert runner.failures == ["vae: loss is nan"]

    def test_failed_arm_raises_by_default(self, mocker, plan):
        mocker.patch(
            "ce_vae.studies.train_model",
            side_effect=TrainingAbortedError("loss is nan", epoch=1, batch=0),
        )

        with pytest.raises(TrainingAbortedError):
            StudyRunner(plan).run("cross")

    def test_unknown_kind(self, plan):
        with pytest.raises(ConfigurationError) as exc_info:
            StudyRunner(plan).run("ablation")

        assert "sweep, size, pretrain, cross, width" in str(exc_info.value)

    def test_from_file(self, tmp_path):
        path = tmp_path / "plan.yaml"
        path.write_text("snr_grid: [0, 5]\ntarget_scenario: B\n")

        runner = StudyRunner.from_file(path, parallel_workers=2)

        assert runner.plan.snr_grid == [0.0, 5.0]
        assert runner.plan.target_scenario == "B"
        assert runner.parallel_workers == 2
