from __future__ import annotations

import pytest

VERDICTS: list = []


@pytest.fixture
def verdict():
    """Record one acceptance line: verdict(number, ok, detail)."""

    def record(number: int, ok: bool, detail: str) -> bool:
        VERDICTS.append((number, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
