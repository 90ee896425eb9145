import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mgrnet import ModelConfig, init_params

settings.register_profile(
    "default",
    max_examples=100,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(P=6, D=8, H=2, L_lgr=2, L_grmm=2, k=2, num_classes=3)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, 0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.LINES):
        terminalreporter.write_line(mod.LINES[n])
