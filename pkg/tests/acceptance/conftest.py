"""Desk-scale data and trained models shared by the acceptance runs."""

import pytest

from ce_vae.models import VaeConfig
from ce_vae.studies import generate_scenario, train_model

DESK_COUNTS = {"train": 20000, "val": 2000, "test": 2000}


@pytest.fixture(scope="session")
def desk_config():
    """4 x 16 array, CH=8; epoch cap and patience shortened for a laptop CPU."""
    return VaeConfig(max_epochs=60, patience=10)


@pytest.fixture(scope="session")
def scenario_data(desk_config):
    """Generated splits per scenario tag, built on first use."""
    cache = {}

    def get(tag):
        if tag not in cache:
            cache[tag] = generate_scenario(tag, desk_config, DESK_COUNTS)
        return cache[tag]

    return get


@pytest.fixture(scope="session")
def trained(scenario_data, desk_config):
    """VAE trained on the full training split of a scenario, built on first use."""
    cache = {}

    def get(tag):
        if tag not in cache:
            data = scenario_data(tag)
            cache[tag] = train_model(data.train, data.val, desk_config)
        return cache[tag]

    return get
