import os

import numpy as np
import pytest

import chunktune
from chunktune import PROGRESS_BAR_ENV
from chunktune.model import (
    AcquisitionGeometry,
    Grid3,
    RickerSource,
    build_homogeneous_model,
    build_two_layer_model,
)
from chunktune.parsched import THREADS_ENV, WorkerPool


@pytest.fixture
def pool():
    with WorkerPool(3) as p:
        yield p


@pytest.fixture
def serial_pool():
    with WorkerPool(1) as p:
        yield p


@pytest.fixture
def small_grid():
    return Grid3(14, 12, 16, 10.0, 10.0, 10.0, wb=4)


@pytest.fixture
def small_model(small_grid):
    return build_two_layer_model(small_grid, 1500.0, 2000.0)


@pytest.fixture
def homogeneous_model(small_grid):
    return build_homogeneous_model(small_grid, 2000.0)


@pytest.fixture
def small_geometry(small_grid):
    source = RickerSource(20.0, (7, 6, 3))
    receivers = [(i1, i2, 3) for i1 in range(0, 14, 3) for i2 in (2, 9)]
    return AcquisitionGeometry(source, receivers, ns=40, dt=0.001)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def run_around_tests():
    os.environ[PROGRESS_BAR_ENV] = "1"
    os.environ.pop(THREADS_ENV, None)
    yield
    chunktune.VERBOSITY = 0


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run wall-clock and full-size tests.",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
