import sys
from pathlib import Path

import pytest

# make the shared oracles module importable from every test file
sys.path.insert(0, str(Path(__file__).parent))

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion; the lines are echoed in the session summary."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
        _VERDICTS.append((criterion, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS, key=lambda item: item[0]):
            terminalreporter.write_line(line)
