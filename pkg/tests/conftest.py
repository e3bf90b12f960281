import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def report():
    """``report(n, name, ok, detail)`` records one acceptance line and returns ``ok``."""

    def _report(n, name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:<3} {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
