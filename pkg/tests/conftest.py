import pytest
from hypothesis import settings

# reproducible property runs: the same examples every time
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def log(n: int, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
