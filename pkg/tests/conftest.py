"""
Shared fixtures for the test suite
"""

import os
import sys

import pytest

# Tests import the flat packages by name, like main.py does
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tools.phase_space import Configuration, Particle, TimeGrid  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance studies")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def grid_k2():
    return TimeGrid(2, 0.5, 1)


@pytest.fixture
def grid_k1():
    return TimeGrid(1, 0.5, 1)


@pytest.fixture
def three_static(grid_k1):
    """Static particles at 0.2 / 0.5 / 0.8 on the K = 1 grid"""
    return Configuration(tuple(Particle((x,), (0.0,), 1.0) for x in (0.2, 0.5, 0.8)), grid_k1)


@pytest.fixture
def tight_triplet():
    """Three static particles 1.87/128 apart around 0.5"""
    grid = TimeGrid(1, 0.5, 1)
    spacing = 1.87 / 128
    return Configuration(tuple(Particle((0.5 + s * spacing,), (0.0,), 1.0) for s in (-1, 0, 1)), grid)


@pytest.fixture
def write_config(tmp_path):
    """Write a JSON config into tmp_path and return its path"""
    import json

    def _write(data, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data, indent=2))
        return str(path)

    return _write
