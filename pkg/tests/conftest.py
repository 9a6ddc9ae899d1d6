"""Collects acceptance verdicts and prints them after the run."""

import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    def record(n: int, ok: bool, detail: str) -> None:
        _VERDICTS[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        print(_VERDICTS[n])
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
