import os
import sys

import pytest

_OPENED: list[str] | None = None


def _hook(event, args):
    if event == "open" and _OPENED is not None and isinstance(args[0], (str, bytes, os.PathLike)):
        _OPENED.append(os.fsdecode(args[0]))


sys.addaudithook(_hook)


@pytest.fixture
def file_audit():
    """Collect the path of every file opened while the fixture is active."""
    global _OPENED
    _OPENED = []
    try:
        yield _OPENED
    finally:
        _OPENED = None


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def record(criterion: int, ok: bool, detail: str) -> None:
        line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
