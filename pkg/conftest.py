import math

import numpy as np
import pytest

from stochnudge.spectral import WaveGrid


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='Run acceptance-scale tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: acceptance-scale run, enabled with --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def grid16():
    return WaveGrid(2.0 * math.pi, 16)


@pytest.fixture
def grid32():
    return WaveGrid(2.0 * math.pi, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
