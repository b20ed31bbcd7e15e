import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_trained():
    """A small cloud and a briefly trained state, shared by codec and CLI tests."""
    from triplane_codec.anchors import synth_correlated_cloud
    from triplane_codec.trainer import TrainConfig, fit

    cloud = synth_correlated_cloud(3, 400)
    cfg = TrainConfig(total_steps=30, resolution=16, channels=4, hidden=16, seed=3)
    return cloud, cfg, fit(cloud, cfg)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Recorder for acceptance verdicts, echoed in the terminal summary."""
    def record(number, ok, detail):
        _ACCEPTANCE[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
