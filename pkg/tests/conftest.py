import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedlab.data import synth_blobs

settings.register_profile(
    "fedlab", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile("fedlab")


@pytest.fixture(scope="session")
def blobs():
    """Small 3-class problem shared by the optimizer and harness tests."""
    return synth_blobs(60, 3, 5, 0.5, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append((number, line))
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
