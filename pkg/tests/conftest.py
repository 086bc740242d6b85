import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from loracl import tensor as T

_ACCEPTANCE_LINES = []


def record_acceptance(line: str):
    """Collect a criterion verdict so the terminal summary can replay it."""
    _ACCEPTANCE_LINES.append(line)


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
