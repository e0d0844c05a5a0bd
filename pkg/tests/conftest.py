"""Shared pytest hooks: acceptance verdicts are collected and echoed at the end of the run."""

import pytest

VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS[number] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
