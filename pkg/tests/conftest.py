import contextlib
import time

import pytest

ACCEPTANCE = []


@contextlib.contextmanager
def criterion(name):
    """Record one acceptance line; the summary is printed after the run."""
    start = time.perf_counter()
    detail = {}
    try:
        yield detail
    except BaseException:
        ACCEPTANCE.append((name, False, time.perf_counter() - start, detail))
        raise
    ACCEPTANCE.append((name, True, time.perf_counter() - start, detail))


@pytest.fixture
def record():
    return criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, seconds, detail in ACCEPTANCE:
        extra = " ".join(f"{k}={v}" for k, v in detail.items())
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({seconds:.1f}s) {extra}")
