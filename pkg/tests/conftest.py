import numpy as np
import pytest

from bimanual_transfer import diffcore as dc


@pytest.fixture(autouse=True)
def float64_default():
    dc.set_default_dtype("float64")
    yield
    dc.set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
