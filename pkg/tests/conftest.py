import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hbuq.data import GeneratorConfig, TimeHistoryRecord, split_segments, synthesize_sdof_dataset
from hbuq.model import SdofSpec, three_story_building, simulate

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def sdof_spec():
    return SdofSpec(1 / (2 * np.pi), 0.045)


@pytest.fixture(scope="session")
def shear_spec():
    return three_story_building()


@pytest.fixture(scope="session")
def sdof_record():
    return synthesize_sdof_dataset(GeneratorConfig(seed=11, duration=200.0), return_truth=True)


@pytest.fixture(scope="session")
def sdof_segment(sdof_record):
    record, _ = sdof_record
    return split_segments(record, 4000, 1)[0]


def make_segment(spec, theta, psi, n=1500, dt=0.01, seed=0, noise=0.0, quantity="displacement",
                 sensors=None):
    """Segment generated by the model itself, with optional white noise."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(n)
    h = simulate(spec, theta, psi, u, dt, n)
    sensors = tuple(range(spec.n_dof)) if sensors is None else tuple(sensors)
    y = h.quantity(quantity)[list(sensors)]
    if noise:
        y = y + noise * np.std(y, axis=1, keepdims=True) * rng.standard_normal(y.shape)
    return TimeHistoryRecord(dt, u[None, :], y, sensors, quantity)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
