import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scanweave import simulation as sim

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="scanweave")


@pytest.fixture(scope="session")
def box_world():
    return sim.box_world(20, seed=3, half_extent=12.0)


@pytest.fixture(scope="session")
def box_cloud(box_world):
    """Zero-noise surface samples of boxes on a ground plane (6000 points)."""
    return sim.sample_surfaces(box_world, 6000, seed=0, extent=12.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record():
    def _record(number, title, ok, detail=""):
        line = f"ACCEPTANCE {number} {title}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
