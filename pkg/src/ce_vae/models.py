"""Pydantic models for geometry, scenarios, training configs, plans and result records."""

import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar

import numpy as np
import yaml
from pydantic import BaseModel, Field, field_validator, model_validator

from ce_vae.exceptions import ConfigurationError


ModelT = TypeVar("ModelT", bound="YamlModel")

DEFAULT_SNR_GRID = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0]


class YamlModel(BaseModel):
    """Base model with YAML and dict loaders."""

    @classmethod
    def from_yaml(cls: Type[ModelT], path: Path) -> ModelT:
        """Load a model from a YAML file.

        Args:
            path: Path to YAML file

        Returns:
            Model instance

        Raises:
            FileNotFoundError: If file doesn't exist
            ValidationError: If YAML content is invalid
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"File not found: {path}")

        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}

        return cls(**data)

    @classmethod
    def from_dict(cls: Type[ModelT], data: dict) -> ModelT:
        return cls(**data)

    def to_yaml(self, path: Path) -> None:
        """Save the model to a YAML file.

        Args:
            path: Path to save YAML file
        """
        with open(path, "w") as f:
            yaml.safe_dump(
                self.model_dump(mode="json"), f, default_flow_style=False, sort_keys=False
            )

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


class UraGeometry(YamlModel):
    """Uniform rectangular array: ``n_v`` rows by ``n_h`` columns."""

    n_v: int = Field(default=4, ge=1, description="Vertical antenna count")
    n_h: int = Field(default=16, ge=1, description="Horizontal antenna count")
    spacing_v: float = Field(default=1.0, gt=0, description="Vertical spacing in wavelengths")
    spacing_h: float = Field(default=0.5, gt=0, description="Horizontal spacing in wavelengths")

    model_config = {"frozen": True}

    @property
    def n(self) -> int:
        """Total antenna count N = n_v * n_h."""
        return self.n_v * self.n_h


class ScenarioConfig(YamlModel):
    """Sum-of-paths multipath scenario.

    Per channel a mean azimuth/elevation is drawn uniformly from the configured ranges;
    every path deviates from it by a Gaussian offset with the configured spread.
    """

    scenario_id: str = Field(..., description="Scenario tag (A or B)")
    geometry: UraGeometry = Field(default_factory=UraGeometry, description="Array geometry")
    carrier_frequency: float = Field(default=2.18e9, gt=0, description="Carrier frequency (Hz)")
    min_paths: int = Field(..., ge=1, description="Minimum path count")
    max_paths: int = Field(..., ge=1, description="Maximum path count")
    los_probability: float = Field(..., ge=0, le=1, description="Probability of a LOS path")
    azimuth_range: Tuple[float, float] = Field(
        default=(-math.pi / 3, math.pi / 3), description="Mean azimuth range (rad)"
    )
    elevation_range: Tuple[float, float] = Field(
        default=(-math.pi / 12, math.pi / 12), description="Mean elevation range (rad)"
    )
    azimuth_spread: float = Field(..., ge=0, description="Per-path azimuth spread (rad)")
    elevation_spread: float = Field(..., ge=0, description="Per-path elevation spread (rad)")
    delay_spread: float = Field(..., ge=0, description="Maximum excess delay (s)")
    gain_decay: float = Field(default=3.0, ge=0, description="Exponential power decay rate")
    seed: int = Field(default=0, ge=0, description="Scenario RNG seed")

    @model_validator(mode="after")
    def check_path_range(self) -> "ScenarioConfig":
        if self.max_paths < self.min_paths:
            raise ValueError(
                f"max_paths ({self.max_paths}) must be >= min_paths ({self.min_paths})"
            )
        for name in ("azimuth_range", "elevation_range"):
            low, high = getattr(self, name)
            if high < low:
                raise ValueError(f"{name} must be (low, high) with low <= high")
        return self

    @classmethod
    def preset(cls, name: str, geometry: Optional[UraGeometry] = None) -> "ScenarioConfig":
        """Return a shipped scenario preset.

        Raises:
            ConfigurationError: If ``name`` is not a preset
        """
        if name not in SCENARIO_PRESETS:
            raise ConfigurationError(
                f"Unknown scenario '{name}'; presets: {', '.join(sorted(SCENARIO_PRESETS))}"
            )
        data = dict(SCENARIO_PRESETS[name])
        if geometry is not None:
            data["geometry"] = geometry
        return cls(**data)


SCENARIO_PRESETS: Dict[str, Dict[str, Any]] = {
    # Narrow spread, few paths.
    "A": {
        "scenario_id": "A",
        "min_paths": 2,
        "max_paths": 6,
        "los_probability": 0.6,
        "azimuth_spread": 0.05,
        "elevation_spread": 0.03,
        "delay_spread": 2e-7,
        "gain_decay": 3.0,
        "seed": 1,
    },
    # Wide spread, rich scattering.
    "B": {
        "scenario_id": "B",
        "min_paths": 8,
        "max_paths": 20,
        "los_probability": 0.3,
        "azimuth_spread": 0.2,
        "elevation_spread": 0.1,
        "delay_spread": 6e-7,
        "gain_decay": 2.0,
        "seed": 2,
    },
}

GAUSSIAN_SCENARIO = "G"


class GaussianPriorConfig(YamlModel):
    """Zero-mean complex Gaussian channel prior with a low-rank-plus-identity covariance."""

    scenario_id: str = Field(default=GAUSSIAN_SCENARIO, description="Scenario tag")
    geometry: UraGeometry = Field(default_factory=UraGeometry, description="Array geometry")
    rank: int = Field(default=8, ge=1, description="Rank of the low-rank component")
    loading: float = Field(default=0.05, gt=0, description="Identity loading before scaling")
    seed: int = Field(default=3, ge=0, description="Seed for drawing the covariance")

    @model_validator(mode="after")
    def check_rank(self) -> "GaussianPriorConfig":
        if self.rank > self.geometry.n:
            raise ValueError(f"rank {self.rank} exceeds antenna count {self.geometry.n}")
        return self


class SnrPolicy(YamlModel):
    """How training observations are noised: one fixed SNR or per-sample uniform in dB."""

    mode: Literal["fixed", "uniform"] = Field(default="uniform", description="SNR policy")
    snr_db: float = Field(default=10.0, description="SNR for the fixed policy (dB)")
    low_db: float = Field(default=-10.0, description="Lower bound for the uniform policy (dB)")
    high_db: float = Field(default=25.0, description="Upper bound for the uniform policy (dB)")

    @model_validator(mode="after")
    def check_bounds(self) -> "SnrPolicy":
        if self.high_db < self.low_db:
            raise ValueError(f"high_db ({self.high_db}) must be >= low_db ({self.low_db})")
        return self

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Draw ``count`` SNR values in dB."""
        if self.mode == "fixed":
            return np.full(count, self.snr_db)
        return rng.uniform(self.low_db, self.high_db, size=count)


class VaeConfig(YamlModel):
    """VAE architecture and training hyperparameters."""

    geometry: UraGeometry = Field(default_factory=UraGeometry, description="Array geometry")
    latent_dim: int = Field(default=32, ge=1, description="Latent dimension N_L")
    base_channels: int = Field(default=8, ge=1, description="Base channel width CH")
    width_multiplier: float = Field(default=1.75, gt=0, description="Width growth per block")
    blocks: int = Field(default=3, ge=1, description="Strided convolution blocks")
    kernel_size: int = Field(default=11, ge=1, description="Convolution kernel size")
    stride: int = Field(default=2, ge=1, description="Convolution stride")
    learning_rate: float = Field(default=5e-4, gt=0, description="Adam learning rate")
    batch_size: int = Field(default=256, ge=2, description="Mini-batch size")
    patience: int = Field(default=30, ge=1, description="Early-stopping patience (epochs)")
    max_epochs: int = Field(default=300, ge=1, description="Epoch cap")
    snr_policy: SnrPolicy = Field(default_factory=SnrPolicy, description="Training SNR policy")
    validation_snr_db: float = Field(default=20.0, description="Validation SNR (dB)")
    zero_init_heads: bool = Field(default=False, description="Zero the final dense layers")
    seed: int = Field(default=0, ge=0, description="Initialization and shuffling seed")

    @field_validator("kernel_size")
    @classmethod
    def validate_kernel(cls, v: int) -> int:
        """Odd kernels keep 'same'-style padding symmetric."""
        if v % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return v


class ExperimentPlan(YamlModel):
    """Inputs of an experiment protocol (SNR sweep, training-size, transfer studies)."""

    estimators: List[str] = Field(
        default_factory=lambda: ["vae", "ls", "lmmse", "genie-omp"],
        description="Estimator ids to evaluate",
    )
    snr_grid: List[float] = Field(
        default_factory=lambda: list(DEFAULT_SNR_GRID), description="SNR grid (dB)"
    )
    scenarios: List[str] = Field(
        default_factory=lambda: ["A", "B"], description="Scenarios for cross evaluation"
    )
    target_scenario: str = Field(default="A", description="Scenario for size/fine-tune studies")
    pretrain_scenario: str = Field(default="B", description="Pre-training scenario")
    train_count: int = Field(default=20000, ge=2, description="Training samples per scenario")
    val_count: int = Field(default=2000, ge=1, description="Validation samples per scenario")
    test_count: int = Field(default=2000, ge=1, description="Test samples per scenario")
    training_sizes: List[int] = Field(
        default_factory=lambda: [100, 1000, 10000, 20000], description="Training-size study sizes"
    )
    finetune_sizes: List[int] = Field(
        default_factory=lambda: [0, 1000], description="Fine-tuning sizes"
    )
    eval_snr_db: float = Field(default=20.0, description="SNR for the training-size study (dB)")
    widths: List[int] = Field(
        default_factory=lambda: [4, 16, 32, 64], description="Width study base channel counts"
    )
    width_snr_grid: List[float] = Field(
        default_factory=lambda: [10.0, 20.0], description="SNR grid of the width study (dB)"
    )
    noise_seed: int = Field(default=7, ge=0, description="Seed for evaluation noise")
    data_seed: Optional[int] = Field(
        default=None, ge=0, description="Override for the scenario seeds"
    )
    vae: VaeConfig = Field(default_factory=VaeConfig, description="VAE configuration")

    @field_validator("snr_grid", "width_snr_grid")
    @classmethod
    def validate_snr_grid(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("SNR grid must not be empty")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("SNR grid must be sorted ascending without duplicates")
        return v

    @field_validator("widths")
    @classmethod
    def validate_widths(cls, v: List[int]) -> List[int]:
        if any(w < 1 for w in v):
            raise ValueError("widths must be positive")
        return v

    @field_validator("training_sizes", "finetune_sizes")
    @classmethod
    def validate_sizes(cls, v: List[int]) -> List[int]:
        if any(s < 0 for s in v):
            raise ValueError("sizes must be non-negative")
        if any(b < a for a, b in zip(v, v[1:])):
            raise ValueError("sizes must be sorted ascending")
        return v


class EvalRecord(BaseModel):
    """One result row: estimator, scenario, SNR and NMSE.

    ``nmse`` is ``None`` when the estimator failed for this cell; the reason is kept in
    ``extras['error']``.
    """

    estimator: str = Field(..., description="Estimator id")
    scenario: str = Field(..., description="Scenario tag of the test set")
    snr_db: float = Field(..., description="SNR (dB)")
    nmse: Optional[float] = Field(..., description="Normalized MSE")
    samples: int = Field(..., ge=0, description="Test sample count")
    extras: Dict[str, str] = Field(default_factory=dict, description="Extra key/values")

    @field_validator("nmse")
    @classmethod
    def validate_nmse(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and (not math.isfinite(v) or v < 0):
            raise ValueError(f"nmse must be finite and >= 0, got {v}")
        return v

    @property
    def failed(self) -> bool:
        return self.nmse is None


class EpochRecord(BaseModel):
    """Per-epoch training history entry."""

    epoch: int = Field(..., ge=1, description="Epoch number (1-based, continues on resume)")
    train_loss: float = Field(..., description="Mean training loss")
    val_nmse: float = Field(..., description="Validation NMSE")


class RunManifest(YamlModel):
    """Everything needed to reproduce one CLI run."""

    command: str = Field(..., description="Subcommand name")
    config: Dict[str, Any] = Field(default_factory=dict, description="Resolved configuration")
    seeds: Dict[str, int] = Field(default_factory=dict, description="Seeds used")
    inputs: List[str] = Field(default_factory=list, description="Input paths")
    outputs: List[str] = Field(default_factory=list, description="Output paths")
    version: str = Field(..., description="ce-vae version")
    duration_seconds: float = Field(default=0.0, ge=0, description="Wall-clock duration")
    failures: List[str] = Field(default_factory=list, description="Failed arms or cells")
