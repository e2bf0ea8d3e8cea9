import sys
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from avc_lab.raw_io import (BranchRecord, BusRecord, BusType, GenRecord, LoadRecord,
                            PowerFlowCase, load_ieee14)


_acceptance = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_acceptance] = {}


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_acceptance, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, lines = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
        for line in lines:
            terminalreporter.write_line(f"    {line}")


class _Checks:
    def __init__(self):
        self.lines, self.failures = [], []

    def check(self, ok, message):
        self.lines.append(f"[{'ok' if ok else 'FAILED'}] {message}")
        if not ok:
            self.failures.append(message)


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion's verdict.

    Every ``check`` inside the block is evaluated and reported; the block
    then fails if any check (or the code itself) failed.
    """
    store = request.config.stash[_acceptance]

    @contextmanager
    def record(number, title):
        checks = _Checks()
        try:
            yield checks
        except BaseException as exc:
            checks.lines.append(f"[FAILED] {type(exc).__name__}: {exc}")
            store[number] = (title, False, checks.lines)
            raise
        ok = not checks.failures
        store[number] = (title, ok, checks.lines)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
        for line in checks.lines:
            print(f"    {line}")
        assert ok, "; ".join(checks.failures)

    return record


@pytest.fixture(scope="session")
def ieee14():
    return load_ieee14()


@pytest.fixture
def two_bus():
    """Slack bus 1 feeding an unloaded PQ bus 2 over a lossless line x = 0.1."""
    return make_two_bus()


def make_two_bus(pd=0.0, qd=0.0, x=0.1, r=0.0, b=0.0):
    buses = (BusRecord(1, "SLACK", 100.0, BusType.SLACK, 1.0),
             BusRecord(2, "LOAD", 100.0, BusType.PQ, 1.0))
    gens = (GenRecord(1, 0.0, 0.0, 999.0, -999.0, 1.0),)
    loads = (LoadRecord(2, pd, qd),) if pd or qd else ()
    branches = (BranchRecord(1, 2, r, x, b),)
    return PowerFlowCase(100.0, buses, loads, gens, branches, title="two bus")
