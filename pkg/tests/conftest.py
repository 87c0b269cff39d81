import numpy as np
import pytest

from reprise import netcore
from reprise.netcore import Architecture


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def random_params(kind, h, seed, std=0.5):
    return netcore.init_weights(Architecture(kind, h), seed, std=std)


def random_state(arch, rng, scale=0.5):
    h = rng.uniform(-scale, scale, arch.hidden_dim)
    c = rng.uniform(-scale, scale, arch.hidden_dim) if arch.is_lstm else None
    return netcore.NetworkState(h, c)


def random_inputs(arch, rng, n):
    x = rng.uniform(0.0, 1.0, (n, arch.input_dim))
    x[:, netcore.SENSOR] = rng.uniform([-1.5, 0.0], [1.5, 2.0], (n, 2))
    return x


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
