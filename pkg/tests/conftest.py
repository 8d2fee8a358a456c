import numpy as np
import pytest
from hypothesis import settings

from apce.measure import random_mixture, sample_gaussian_mixture

settings.register_profile("apce", max_examples=40, deadline=None)
settings.load_profile("apce")


@pytest.fixture(scope="session")
def gm3():
    """3-d mixture samples shared by cheap tests."""
    spec = random_mixture(3, 3, seed=1)
    return sample_gaussian_mixture(spec, 4000, seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
