import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from instances import coupled_instance, interval_instance, scalar_bilevel  # noqa: E402

CRITERIA_LINES: dict = {}


@pytest.fixture
def single_interval():
    return interval_instance([2.0], [1.0])


@pytest.fixture
def two_point_interval():
    return interval_instance([0.0, 2.0], [0.5, 0.5])


@pytest.fixture
def coupled():
    return coupled_instance([1.0], [1.0])


@pytest.fixture
def scalar_gb():
    return scalar_bilevel()


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA_LINES):
        terminalreporter.write_line(CRITERIA_LINES[key])
