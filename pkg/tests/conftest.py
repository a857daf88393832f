import numpy as np
import pytest

from utils.data_utils import make_synthetic_dataset
from utils.tensor_utils import init_mlp


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the slow multi-seed reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("RAMP_KIT_SEED", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def moons():
    return make_synthetic_dataset("moons", 64, 2, noise=0.1, seed=3)


@pytest.fixture
def blobs():
    return make_synthetic_dataset("blobs", 60, 4, noise=0.5, seed=5, classes=3)


@pytest.fixture
def small_model():
    return init_mlp([2, 8, 2], seed=11)


@pytest.fixture
def blob_model():
    return init_mlp([4, 8, 3], seed=7)
