import os
import sys

# Add the project root directory to Python path
project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

# Configure asyncio for testing
import pytest
import asyncio
import json
import numpy as np


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance runs (deselect with -m 'not slow')")


@pytest.fixture(scope="session")
def event_loop():
    """Create an instance of the default event loop for each test case."""
    loop = asyncio.get_event_loop_policy().new_event_loop()
    yield loop
    loop.close()


@pytest.fixture
def reference_triples():
    """The four reference (a, b, lambda) triples"""
    return [(1.0, 1.0, 1.0), (-1.0, -2.0, 1.0), (0.0, 1.0, 1.0), (-1.0, 0.0, 1.0)]


@pytest.fixture
def default_params():
    from src.stability_core.core import SystemParams
    return SystemParams(a=1.0, b=1.0, lam=1.0, L=1.0, k=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def settings_file(tmp_path):
    """A JSON settings file overriding a couple of defaults"""
    path = tmp_path / "settings.json"
    path.write_text(json.dumps({"simulation": {"n_cells": 40}, "sweep": {"jobs": 2}}))
    return str(path)
