"""ce-vae - VAE-based MMSE channel estimation trained on noisy observations."""

from ce_vae.channels import ChannelDataset, ChannelGenerator
from ce_vae.estimators import ESTIMATOR_IDS, Estimator, build_estimator
from ce_vae.exceptions import (
    CeVaeError,
    ConfigurationError,
    DataError,
    NumericalError,
    UsageError,
)
from ce_vae.models import ExperimentPlan, UraGeometry, VaeConfig
from ce_vae.studies import StudyRunner
from ce_vae.training import Trainer
from ce_vae.vae import VaeModel, build_architecture

__version__ = "0.1.0"
__all__ = [
    "ChannelDataset",
    "ChannelGenerator",
    "ESTIMATOR_IDS",
    "Estimator",
    "build_estimator",
    "CeVaeError",
    "ConfigurationError",
    "DataError",
    "NumericalError",
    "UsageError",
    "ExperimentPlan",
    "UraGeometry",
    "VaeConfig",
    "StudyRunner",
    "Trainer",
    "VaeModel",
    "build_architecture",
]
