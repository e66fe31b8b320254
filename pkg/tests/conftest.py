"""Acceptance verdicts are collected here and repeated in the terminal summary."""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """``verdict(n, title, ok, detail)`` prints one PASS/FAIL line and asserts ``ok``."""

    def record(n: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}" + (f" ({detail})" if detail else "")
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture(scope="session")
def note():
    """``note(line)`` adds an informational line to the acceptance summary."""

    def record(line: str) -> None:
        _VERDICTS.append(f"       {line}")
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
