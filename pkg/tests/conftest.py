import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ricprobe", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ricprobe")

_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(tag, ok, detail)``."""

    def record(tag, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
        _LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rs():
    return np.random.default_rng(1234)
