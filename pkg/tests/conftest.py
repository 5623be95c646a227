import numpy as np
import pytest

from hesscore.data import Dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: runs for more than a few seconds")


@pytest.fixture
def blobs():
    """Small two-class Gaussian problem, 60/20 split."""
    rng = np.random.default_rng(7)
    X = np.vstack([rng.normal(-1.0, 1.0, size=(60, 3)), rng.normal(1.0, 1.0, size=(20, 3))])
    y = np.r_[np.zeros(60, dtype=int), np.ones(20, dtype=int)]
    return Dataset(X, y, "blobs")


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report(capsys):
    """Record and print the single PASS/FAIL line of an acceptance criterion."""

    def _report(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        with capsys.disabled():
            print(f"\n{line}")

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
