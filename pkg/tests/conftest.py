import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flowdepth import synth
from flowdepth.geometry import Intrinsics

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def K100():
    """fx = fy = 100, principal point (50, 50)."""
    return Intrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


@pytest.fixture(scope="session")
def ego_bundle():
    return synth.generate(synth.ego_scene_spec(0, min_trans=0.05))


@pytest.fixture(scope="session")
def moving_bundle():
    return synth.generate(synth.moving_object_spec(0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
