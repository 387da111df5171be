"""Shared fixtures for the invtrain test-suite."""

import numpy as np
import pytest

from invtrain.config.settings import get_settings
from invtrain.datagen import generate_dataset
from invtrain.schemas import ChipSpec, TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the long empirical checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def fresh_settings():
    """Settings are cached per process; every test starts from the environment it sets up."""
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return ChipSpec(side=16, num_classes=3, shots_per_class=4, test_per_class=4, seed=7)


@pytest.fixture
def small_config():
    return TrainConfig(epochs=3, warmup_epochs=1, batch_size=6, hidden_channels=4, c_feat=6, seed=3)


@pytest.fixture
def dataset_dir(tmp_path, small_spec):
    out = tmp_path / "data"
    generate_dataset(small_spec, out)
    return out
