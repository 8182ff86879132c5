"""Shared fixtures and the acceptance-summary hook."""

import numpy as np
import pytest

from cnslab.fourier import make_grid

# Filled by tests/test_acceptance.py; printed after the run so the
# per-criterion verdict lines survive pytest's output capture.
ACCEPTANCE_LINES = []
RECORDED_CONSTANTS = []


def record_constant(name, value):
    RECORDED_CONSTANTS.append(f"{name} = {value:.6g}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def grid1d():
    return make_grid(1, 64)


@pytest.fixture(scope="session")
def grid2d():
    return make_grid(2, 32)


@pytest.fixture(scope="session")
def grid3d():
    return make_grid(3, 16)


def pytest_terminal_summary(terminalreporter):
    if RECORDED_CONSTANTS:
        terminalreporter.write_sep("-", "measured suite constants")
        for line in RECORDED_CONSTANTS:
            terminalreporter.write_line(line)
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
