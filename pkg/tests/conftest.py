import numpy as np
import pytest

from ssta.node_model import ModelConfig
from ssta.world import WorldConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the slow end-to-end experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(height=6, width=6, hidden_channels=2, msg_dim=3, kernel_size=3)


@pytest.fixture
def tiny_world():
    return WorldConfig(preset="ladder", grid_size=32, view_size=8, n_views=4, n_vehicles=6, seed=3)


@pytest.fixture(autouse=True)
def _no_api_key(monkeypatch):
    monkeypatch.delenv("SSTA_API_KEY", raising=False)
