import pytest

_RESULTS = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion; returns ``ok`` for asserting."""

    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {str(number):>3}: {title}"
        if detail:
            line += f" ({detail})"
        _RESULTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in _RESULTS:
        terminalreporter.write_line(line)
