from __future__ import annotations

import numpy as np
import pytest

from kraichnan_lab import CovarianceSpec, Grid


@pytest.fixture
def scalar1():
    return CovarianceSpec(1, 1.0, "isotropic-scalar", 0.5, 1.0)


@pytest.fixture
def incomp2():
    return CovarianceSpec(2, 1.0, "incompressible", 0.5, 1.0)


@pytest.fixture
def grid1():
    return Grid(1, 128, 32.0)


@pytest.fixture
def grid2():
    return Grid(2, 128, 32.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: list = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, title, ok, detail)``."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  [{number:2d}] {title}" + (f" -- {detail}" if detail else "")
        _CRITERIA.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA, key=lambda x: x[0]):
        terminalreporter.write_line(line)
