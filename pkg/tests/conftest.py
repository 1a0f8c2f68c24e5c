import numpy as np
import pytest

from tranet import numcore


@pytest.fixture(autouse=True)
def double_precision():
    """Every test runs in float64 unless it switches explicitly."""
    numcore.set_precision("float64")
    yield
    numcore.set_precision("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
