import pytest

ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail, elapsed, limit)``."""
    def record(n, ok, detail, elapsed, limit):
        ok = bool(ok) and elapsed < limit
        ACCEPTANCE[n] = (f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {detail}  "
                         f"[{elapsed:.1f}s / limit {limit:g}s]")
        print(ACCEPTANCE[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
