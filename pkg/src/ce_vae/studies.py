"""Experiment protocols: SNR sweep, training-size study, pre-train/fine-tune,
cross-scenario evaluation and the network width study, plus the ``StudyRunner``
orchestrator that generates data for a plan and runs them."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ce_vae.channels import (
    ChannelDataset,
    ChannelGenerator,
    normalization_scale,
    normalize_dataset,
    observe,
)
from ce_vae.estimators import (
    Estimator,
    VaeEstimator,
    build_estimator,
    fit_sample_lmmse,
)
from ce_vae.evaluation import snr_sweep
from ce_vae.exceptions import CeVaeError, ConfigurationError, DatasetError
from ce_vae.models import (
    GAUSSIAN_SCENARIO,
    EvalRecord,
    ExperimentPlan,
    GaussianPriorConfig,
    ScenarioConfig,
    VaeConfig,
)
from ce_vae.training import Trainer
from ce_vae.vae import VaeModel, build_architecture


logger = logging.getLogger(__name__)


@dataclass
class ScenarioData:
    """Normalized clean splits of one scenario; ``covariance`` is set for Gaussian priors."""

    scenario: str
    train: ChannelDataset
    val: ChannelDataset
    test: ChannelDataset
    covariance: Optional[np.ndarray] = None


def generate_scenario(
    scenario: str,
    config: VaeConfig,
    counts: Dict[str, int],
    seed: Optional[int] = None,
    parallel_workers: int = 1,
) -> ScenarioData:
    """Generate and normalize train/val/test splits of a scenario preset or the Gaussian
    family ``G``; each split is normalized on its own."""
    geometry = config.geometry
    if scenario == GAUSSIAN_SCENARIO:
        source = GaussianPriorConfig(geometry=geometry)
    else:
        source = ScenarioConfig.preset(scenario, geometry=geometry)
    generator = ChannelGenerator(source, seed=seed, parallel_workers=parallel_workers)
    splits = {}
    scales = {}
    for split, count in counts.items():
        raw = generator.generate(count, split)
        scales[split] = normalization_scale(raw)
        splits[split] = normalize_dataset(raw)
    covariance = None
    if generator.covariance is not None:
        covariance = generator.covariance * scales["test"] ** 2
    return ScenarioData(scenario=scenario, covariance=covariance, **splits)


def train_model(
    train: ChannelDataset,
    val: ChannelDataset,
    config: VaeConfig,
    model: Optional[VaeModel] = None,
) -> VaeModel:
    """Noise the clean training channels per the config's SNR policy and train.

    A given ``model`` is trained further (fresh optimizer state); otherwise a new model is
    built from ``config``.
    """
    noisy = observe(train, config.snr_policy, config.seed)
    model = model if model is not None else build_architecture(config)
    return Trainer(model, config).fit(noisy, val)


def training_size_study(
    data: ScenarioData,
    sizes: Sequence[int],
    config: VaeConfig,
    eval_snr_db: float,
    noise_seed: int,
) -> List[EvalRecord]:
    """Train one model per size on nested prefixes of the training split and evaluate each
    at a single SNR.

    Raises:
        DatasetError: If sizes are unsorted or exceed the training split
    """
    if list(sizes) != sorted(sizes):
        raise DatasetError(f"Training sizes must be sorted ascending, got {list(sizes)}")
    records = []
    for size in sizes:
        logger.info(f"Training-size study: {size} samples")
        model = train_model(data.train.subset(size), data.val, config)
        records += snr_sweep(
            {"vae": VaeEstimator(model)},
            data.test,
            [eval_snr_db],
            noise_seed,
            scenario=data.scenario,
            extras={"training_size": str(size)},
        )
    return records


def width_study(
    data: ScenarioData,
    widths: Sequence[int],
    config: VaeConfig,
    snr_grid: Sequence[float],
    noise_seed: int,
) -> List[EvalRecord]:
    """Train one model per base channel count and evaluate each across ``snr_grid``.

    Rows carry the width and the trainable parameter count of the model.
    """
    records = []
    for channels in widths:
        width_config = config.model_copy(update={"base_channels": channels})
        model = train_model(data.train, data.val, width_config)
        params = model.parameter_count()
        logger.info(f"Width study: CH={channels}, {params} parameters")
        records += snr_sweep(
            {"vae": VaeEstimator(model)},
            data.test,
            snr_grid,
            noise_seed,
            scenario=data.scenario,
            extras={"base_channels": str(channels), "param_count": str(params)},
        )
    return records


def pretrain_finetune(
    pretrained: VaeModel,
    target: ScenarioData,
    sizes: Sequence[int],
    config: VaeConfig,
    snr_grid: Sequence[float],
    noise_seed: int,
    pretrain_scenario: str = "B",
    include_full: bool = True,
    include_zero_shot: bool = True,
) -> List[EvalRecord]:
    """Compare a pre-trained model, fine-tuned copies and scratch-trained models on the
    target test set.

    Emits an optional zero-shot block, one fine-tune and one scratch block per non-zero
    size, and optionally a block trained on the full target training split. Fine-tune
    size 0 reuses the pre-trained model unchanged.
    """
    def sweep(model: VaeModel, extras: Dict[str, str]) -> List[EvalRecord]:
        return snr_sweep(
            {"vae": VaeEstimator(model)},
            target.test,
            snr_grid,
            noise_seed,
            scenario=target.scenario,
            extras=extras,
        )

    def pretrained_extras(arm: str, size: int) -> Dict[str, str]:
        return {
            "arm": arm,
            "pretrain": "true",
            "finetune_size": str(size),
            "pretrained_on": pretrain_scenario,
        }

    records = []
    if include_zero_shot:
        records += sweep(pretrained, pretrained_extras("zero-shot", 0))
    for size in sizes:
        if size == 0:
            records += sweep(pretrained, pretrained_extras("finetune", 0))
            continue
        subset = target.train.subset(size)
        logger.info(f"Fine-tuning on {size} '{target.scenario}' samples")
        tuned = train_model(subset, target.val, config, model=pretrained.clone())
        records += sweep(tuned, pretrained_extras("finetune", size))
        logger.info(f"Scratch training on {size} '{target.scenario}' samples")
        scratch = train_model(subset, target.val, config)
        records += sweep(
            scratch, {"arm": "scratch", "pretrain": "false", "finetune_size": str(size)}
        )
    if include_full:
        full = train_model(target.train, target.val, config)
        records += sweep(
            full,
            {"arm": "full", "pretrain": "false", "finetune_size": str(target.train.count)},
        )
    return records


def cross_eval(
    model: VaeModel,
    test: ChannelDataset,
    snr_grid: Sequence[float],
    noise_seed: int,
    trained_on: str,
    scenario: Optional[str] = None,
) -> List[EvalRecord]:
    """Evaluate a model trained on one scenario on another scenario's test set.

    LS rows are emitted alongside for reference; SNRs where the VAE does worse than LS are
    logged, not treated as failures.
    """
    records = snr_sweep(
        {"vae": VaeEstimator(model), "ls": build_estimator("ls", test.geometry)},
        test,
        snr_grid,
        noise_seed,
        scenario=scenario,
        extras={"trained_on": trained_on},
    )
    ls = {r.snr_db: r.nmse for r in records if r.estimator == "ls"}
    for r in records:
        if r.estimator == "vae" and r.nmse is not None and r.nmse > (ls.get(r.snr_db) or np.inf):
            logger.info(
                f"Model trained on '{trained_on}' is worse than LS on '{r.scenario}' "
                f"at {r.snr_db} dB ({r.nmse:.4f} vs {ls[r.snr_db]:.4f})"
            )
    return records


class StudyRunner:
    """Runs the protocols of an ``ExperimentPlan``, generating scenario data on demand."""

    def __init__(
        self,
        plan: ExperimentPlan,
        parallel_workers: int = 1,
        continue_on_failure: bool = False,
    ):
        """Initialize StudyRunner.

        Args:
            plan: Experiment plan
            parallel_workers: Threads for data generation and sweeps (default: 1)
            continue_on_failure: Record failed arms in ``failures`` instead of raising
        """
        self.plan = plan
        self.parallel_workers = parallel_workers
        self.continue_on_failure = continue_on_failure
        self.failures: List[str] = []
        self._data: Dict[str, ScenarioData] = {}

    @classmethod
    def from_file(cls, path: Path, **kwargs) -> "StudyRunner":
        """Create a runner from a YAML plan file.

        Raises:
            PlanParseError: If the plan is malformed
        """
        from ce_vae.parsers import parse_plan

        logger.info(f"Loading experiment plan from {path}")
        return cls(parse_plan(Path(path)), **kwargs)

    def data(self, scenario: str) -> ScenarioData:
        """Generated (and cached) splits for ``scenario``."""
        if scenario not in self._data:
            counts = {
                "train": self.plan.train_count,
                "val": self.plan.val_count,
                "test": self.plan.test_count,
            }
            self._data[scenario] = generate_scenario(
                scenario,
                self.plan.vae,
                counts,
                seed=self.plan.data_seed,
                parallel_workers=self.parallel_workers,
            )
        return self._data[scenario]

    def _guard(self, arm: str, func, *args, default=None, **kwargs):
        try:
            return func(*args, **kwargs)
        except CeVaeError as e:
            if not self.continue_on_failure:
                raise
            logger.error(f"Arm '{arm}' failed: {e}")
            self.failures.append(f"{arm}: {e}")
            return default

    def _train(self, arm: str, data: ScenarioData) -> Optional[VaeModel]:
        return self._guard(arm, train_model, data.train, data.val, self.plan.vae)

    def snr_sweep(self) -> List[EvalRecord]:
        """Every plan estimator on the target scenario across the SNR grid."""
        data = self.data(self.plan.target_scenario)
        estimators: Dict[str, Estimator] = {}
        for est_id in self.plan.estimators:
            model = None
            if est_id == "vae":
                model = self._train("vae", data)
                if model is None:
                    continue
            estimators[est_id] = build_estimator(
                est_id,
                data.test.geometry,
                model=model,
                lmmse_fit=fit_sample_lmmse(data.train) if est_id == "lmmse" else None,
                covariance=data.covariance,
            )
        return snr_sweep(
            estimators,
            data.test,
            self.plan.snr_grid,
            self.plan.noise_seed,
            scenario=data.scenario,
            parallel_workers=self.parallel_workers,
        )

    def training_size(self) -> List[EvalRecord]:
        data = self.data(self.plan.target_scenario)
        return self._guard(
            "size",
            training_size_study,
            data,
            self.plan.training_sizes,
            self.plan.vae,
            self.plan.eval_snr_db,
            self.plan.noise_seed,
            default=[],
        )

    def pretrain(self) -> List[EvalRecord]:
        source = self.data(self.plan.pretrain_scenario)
        target = self.data(self.plan.target_scenario)
        pretrained = self._train(f"pretrain-{source.scenario}", source)
        if pretrained is None:
            return []

        def arm(name: str, sizes: List[int], zero_shot: bool, full: bool) -> List[EvalRecord]:
            return self._guard(
                name,
                pretrain_finetune,
                pretrained,
                target,
                sizes,
                self.plan.vae,
                self.plan.snr_grid,
                self.plan.noise_seed,
                pretrain_scenario=source.scenario,
                include_full=full,
                include_zero_shot=zero_shot,
                default=[],
            )

        # one guard per size so a failed fine-tune keeps the other blocks
        records = arm("zero-shot", [], zero_shot=True, full=False)
        for size in self.plan.finetune_sizes:
            records += arm(f"finetune-{size}", [size], zero_shot=False, full=False)
        records += arm("full", [], zero_shot=False, full=True)
        return records

    def width(self) -> List[EvalRecord]:
        """Train one model per base channel count on the target scenario."""
        data = self.data(self.plan.target_scenario)
        records = []
        for channels in self.plan.widths:
            records += self._guard(
                f"width-{channels}",
                width_study,
                data,
                [channels],
                self.plan.vae,
                self.plan.width_snr_grid,
                self.plan.noise_seed,
                default=[],
            )
        return records

    def cross(self) -> List[EvalRecord]:
        """Train on every plan scenario and evaluate each model on every scenario."""
        models = {}
        for scenario in self.plan.scenarios:
            model = self._train(f"train-{scenario}", self.data(scenario))
            if model is not None:
                models[scenario] = model
        records = []
        for trained_on, model in models.items():
            for scenario in self.plan.scenarios:
                records += self._guard(
                    f"cross-{trained_on}-{scenario}",
                    cross_eval,
                    model,
                    self.data(scenario).test,
                    self.plan.snr_grid,
                    self.plan.noise_seed,
                    trained_on,
                    scenario=scenario,
                    default=[],
                )
        return records

    def run(self, kind: str) -> List[EvalRecord]:
        """Run one protocol: ``sweep``, ``size``, ``pretrain``, ``cross`` or ``width``."""
        protocols = {
            "sweep": self.snr_sweep,
            "size": self.training_size,
            "pretrain": self.pretrain,
            "cross": self.cross,
            "width": self.width,
        }
        if kind not in protocols:
            raise ConfigurationError(
                f"Unknown study kind '{kind}'; expected {', '.join(protocols)}"
            )
        logger.info(f"Running '{kind}' study")
        return protocols[kind]()

    def cleanup(self) -> None:
        """Drop cached scenario data."""
        self._data.clear()

    def __enter__(self) -> "StudyRunner":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.cleanup()
