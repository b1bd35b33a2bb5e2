import numpy as np
import pytest

from coopmatch.cli import load_scenario


@pytest.fixture(scope="session")
def fig2a():
    return load_scenario("paper_fig2a")


@pytest.fixture(scope="session")
def fig2b():
    return load_scenario("paper_fig2b")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
