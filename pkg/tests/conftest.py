import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from synthnett import tfunet

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_arch():
    return tfunet.ArchConfig(levels=2, base_channels=2)


@pytest.fixture(scope="session")
def small_params(small_arch):
    return tfunet.init_params(small_arch, seed=3)


@pytest.fixture(scope="session")
def small_params_nobypass():
    return tfunet.init_params(tfunet.ArchConfig(levels=2, base_channels=2, bypass=False), seed=3)
