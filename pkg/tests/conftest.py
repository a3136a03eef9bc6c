import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gpp.data import gen_correlated_synthetic

settings.register_profile("gpp", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("gpp")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth():
    return gen_correlated_synthetic(400, 12, 0.0, 3)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(mod.REPORT):
        terminalreporter.write_line(line)
