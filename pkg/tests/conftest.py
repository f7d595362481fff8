"""Shared fixtures: small geometries, seeded generators and tiny model configs."""

import numpy as np
import pytest

from ce_vae.channels import ChannelDataset, DatasetKind
from ce_vae.models import SnrPolicy, UraGeometry, VaeConfig


@pytest.fixture
def rng():
    """Seeded generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_geometry():
    """2 x 8 array (N=16), the smallest that survives three stride-2 blocks."""
    return UraGeometry(n_v=2, n_h=8)


@pytest.fixture
def tiny_config(small_geometry):
    """Model config small enough for finite differences and quick training."""
    return VaeConfig(
        geometry=small_geometry,
        latent_dim=4,
        base_channels=4,
        kernel_size=3,
        batch_size=8,
        max_epochs=3,
        patience=2,
        snr_policy=SnrPolicy(mode="fixed", snr_db=10.0),
        seed=0,
    )


def make_dataset(geometry, count, rng, kind=DatasetKind.CLEAN, normalized=True):
    """Random complex Gaussian dataset with unit mean power."""
    samples = (
        rng.standard_normal((count, geometry.n)) + 1j * rng.standard_normal((count, geometry.n))
    ) / np.sqrt(2.0)
    noise_vars = np.full(count, 0.1) if kind == DatasetKind.NOISY else None
    return ChannelDataset(
        geometry=geometry,
        kind=kind,
        samples=samples,
        noise_vars=noise_vars,
        normalized=normalized,
        scenario="T",
    )


@pytest.fixture
def clean_dataset(small_geometry, rng):
    return make_dataset(small_geometry, 40, rng)


@pytest.fixture
def dataset_factory(rng):
    """Build random datasets: ``dataset_factory(geometry, count, kind=...)``."""

    def factory(geometry, count, kind=DatasetKind.CLEAN, normalized=True):
        return make_dataset(geometry, count, rng, kind=kind, normalized=normalized)

    return factory
