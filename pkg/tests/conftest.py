"""Shared fixtures for the Deco-Mamba test suite."""

import numpy as np
import pytest

from network import ModelConfig
from run_logging import set_dependencies
from synthetic_data import SynthSpec, synth_generate, write_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long experiments marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def quiet_console():
    """Keep console output out of test logs; tests that inspect it install their own sink."""
    set_dependencies(safe_update_log_func=lambda message, progress=None: None)
    yield
    set_dependencies()


@pytest.fixture
def log_messages():
    messages = []
    set_dependencies(safe_update_log_func=lambda message, progress=None: messages.append(message))
    return messages


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig.preset("tiny")


@pytest.fixture(scope="session")
def tiny_spec():
    return SynthSpec(count=6, val_count=2, height=32, width=32, num_classes=3, noise=0.02)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec):
    return synth_generate(tiny_spec, seed=7)


@pytest.fixture
def dataset_dir(tmp_path, tiny_dataset):
    out_dir = tmp_path / "data"
    write_dataset(tiny_dataset, str(out_dir))
    return out_dir
