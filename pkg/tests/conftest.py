import warnings

import numpy as np
import pytest

from spfnls.linearization import build_linearization
from spfnls.model import make_params, solitary_wave
from spfnls.spectral_core import Grid

ACCEPTANCE_LINES = []


def pytest_configure(config):
    warnings.filterwarnings("ignore", message="wave tail")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def params():
    return make_params(4.0, 0.1, 8.0, 8.16, 4.0)


@pytest.fixture(scope="session")
def grid_mc():
    return Grid(256, 20.0)


@pytest.fixture(scope="session")
def wave_mc(params, grid_mc):
    return solitary_wave(params, grid_mc)


@pytest.fixture(scope="session")
def pack_mc(wave_mc):
    return build_linearization(wave_mc, fit=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_field(rng, n, scale=1.0):
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def smooth_field(rng, grid, width=0.1):
    from spfnls.linearization import random_unit_fields
    return random_unit_fields(grid, 1, rng, bandwidth=1.0 / width / 10)[0]
