import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line, then assert it."""
    def record(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
