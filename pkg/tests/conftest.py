import numpy as np
import pytest

from sensebeam import ScenarioConfig, geometry_from_config


@pytest.fixture
def desk_config():
    """Small deployment used across the module tests."""
    return ScenarioConfig(num_aps=4, antennas_per_ap=4, num_users=2,
                          num_subcarriers=16, num_symbols=13, ap_span=400.0,
                          num_epochs=10, rng_seed=7)


@pytest.fixture
def desk_geometry(desk_config):
    return geometry_from_config(desk_config)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
