import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_LINES = []


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line for an acceptance criterion and return the verdict."""

    def record(cid, ok, detail):
        line = f"{cid} {'PASS' if ok else 'FAIL'}: {detail}"
        _LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
