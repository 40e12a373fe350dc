import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import state_from_series  # noqa: E402

# filled by test_acceptance, printed after the run
ACCEPTANCE_LINES: list = []


@pytest.fixture
def series_state():
    return state_from_series


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line[1])
