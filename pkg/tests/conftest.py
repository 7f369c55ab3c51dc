import numpy as np
import pytest

from digisib.phantom import canonical_params, rasterize

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def phantom():
    return rasterize(canonical_params())


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
