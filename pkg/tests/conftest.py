"""Collects acceptance outcomes and prints them as one PASS/FAIL line each."""

import time
from contextlib import contextmanager

import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    results = request.config.stash[_RESULTS]

    @contextmanager
    def run(name: str):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            detail = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            results.append(("FAIL", name, time.perf_counter() - start, detail))
            raise
        results.append(("PASS", name, time.perf_counter() - start, ""))

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, seconds, detail in results:
        line = f"{status}  {name}  ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))
