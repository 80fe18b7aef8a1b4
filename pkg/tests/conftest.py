import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sigprog.core_model import ModelParams
from sigprog.inference import TrainConfig, train
from sigprog.synthesis import SynthConfig, generate_cohort

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def toy_theta():
    """d=2, m=2 parameters with arbitrary but well-scaled values."""
    return ModelParams(w=[0.4, -0.2], b=0.8, v=[0.5, 0.1], a=[70.0, 74.0],
                       sigma_s=0.3, sigma_p=1.2, c=[-30.0, 18.0], h=[30.0, 0.0],
                       sigma_y=[1.5, 0.9])


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(SynthConfig(n_subjects=150, seed=11))


@pytest.fixture(scope="session")
def small_fit(small_cohort):
    cohort, _ = small_cohort
    return train(cohort, TrainConfig(restarts=1, seed=0, max_iters=3000))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
