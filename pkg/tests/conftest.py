import numpy as np
import pytest
import torch

from beamsplat.rangeview import SensorSpec


@pytest.fixture
def spec():
    return SensorSpec(32, 256, 0.26, 0.26, 1.0, 60.0, 0.04)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one line per acceptance criterion for the end-of-run summary."""
    lines = getattr(request.config, "_acceptance_lines", None)
    if lines is None:
        lines = request.config._acceptance_lines = []
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
