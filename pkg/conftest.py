"""
Pytest configuration and fixtures for testing
"""
import json
from pathlib import Path

import pytest
import torch

from structdiff.config import StructDiffConfig
from structdiff.utils.helpers import make_generator

GOLDEN_DIR = Path(__file__).parent / "golden"

TINY_OVERRIDES = {
    "data.resolution": 16,
    "data.n": 24,
    "data.val_fraction": 0.25,
    "schedule.T": 50,
    "model.width": 8,
    "model.multipliers": [1, 2],
    "model.attention_heads": 2,
    "train.steps": 2,
    "train.batch": 2,
    "train.checkpoint_every": 1000,
    "train.log_every": 1,
    "refiner.base_width": 8,
    "refiner.base_multipliers": [1, 2],
    "refiner.embedder_channels": [4, 4, 8, 8],
    "refiner.base_steps": 2,
    "sample.steps": 2,
    "sample.batch": 2,
    "estimator.width": 8,
    "estimator.steps": 2,
    "estimator.batch": 4,
    "ablation.seeds": [0],
    "ablation.steps": 1,
    "ablation.n_eval": 64,
}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance experiments")
    parser.addoption("--regen-golden", action="store_true", default=False, help="rewrite golden/*.json from the current outputs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config() -> StructDiffConfig:
    """
    A config small enough to train and sample in seconds on CPU:
    R=16, width 8, two resolution levels, T=50.
    """
    return StructDiffConfig().with_overrides(TINY_OVERRIDES)


@pytest.fixture
def generator() -> torch.Generator:
    return make_generator(0)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_config):
    """A 12-scene dataset written to tmp_path/data; returns generate_dataset's result."""
    from structdiff.synth.dataset import generate_dataset

    return generate_dataset(12, tiny_config.data.resolution, 0, tmp_path / "data", val_fraction=0.25)


@pytest.fixture
def golden(request):
    """
    Compare a JSON-serializable value with golden/<name>.json.
    A missing file fails the test; run with --regen-golden to (re)write it.
    """
    regen = request.config.getoption("--regen-golden")

    def check(name: str, value, atol: float = 0.0):
        path = GOLDEN_DIR / f"{name}.json"
        if regen:
            GOLDEN_DIR.mkdir(exist_ok=True)
            path.write_text(json.dumps(value, indent=2, sort_keys=True))
            return
        if not path.exists():
            pytest.fail(f"golden file {path.name} is missing; run pytest --regen-golden and commit golden/")
        expected = json.loads(path.read_text())
        if atol:
            assert torch.allclose(torch.tensor(value, dtype=torch.float64), torch.tensor(expected, dtype=torch.float64), atol=atol)
        else:
            assert value == expected

    return check
