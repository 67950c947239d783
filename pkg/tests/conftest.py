"""Shared fixtures: tiny on-disk pair datasets and small model configs."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import ModelConfig, TrainConfig, env_flag
from datapipe import save_image


def pytest_collection_modifyitems(config, items):
    if env_flag(os.getenv("MH2F_RUN_SLOW")):
        return
    skip_slow = pytest.mark.skip(reason="set MH2F_RUN_SLOW=1 to run slow acceptance tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def write_pairs(directory, count, size=16, seed=0, identical=False):
    """Write rain-K.png / norain-K.png pairs (K from 1) and return the directory."""
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    for k in range(1, count + 1):
        clean = rng.random((size, size, 3))
        rainy = clean if identical else np.clip(clean + 0.3 * rng.random((size, size, 1)), 0.0, 1.0)
        save_image(directory / f"norain-{k}.png", clean)
        save_image(directory / f"rain-{k}.png", rainy)
    return directory


@pytest.fixture
def pair_dir(tmp_path):
    return write_pairs(tmp_path / "pairs", 4)


@pytest.fixture
def micro_model():
    return ModelConfig(num_mheb=2, base_channels=8, seed=3)


@pytest.fixture
def micro_train(micro_model):
    return TrainConfig(
        batch_size=2,
        patch_size=12,
        epochs=1,
        log_every=1,
        seed=5,
        model=micro_model,
    )
