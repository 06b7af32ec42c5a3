import os

import numpy as np
import pytest

CRITERIA = []


def report(label, passed, detail=""):
    """Record one acceptance line; printed together at the end of the session."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {label}: {detail}"
    CRITERIA.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")
    os.environ.setdefault("HOMOLENS_WORKERS", "1")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
