import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from plnav.sim import default_paper_scenarios, simulate  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def clean_datasets():
    """Noise-free simulations of the four default signal sets."""
    return {c.name: simulate(c.noise_free()) for c in default_paper_scenarios(seed=0)}


@pytest.fixture(scope="session")
def noisy_datasets():
    return {c.name: simulate(c) for c in default_paper_scenarios(seed=3)}


# One line per acceptance criterion, collected by tests/test_acceptance.py.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
