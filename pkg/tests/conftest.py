import numpy as np
import pytest

from fedpoison.datakit import ChannelSpec, generate_dataset

ACCEPTANCE_LINES = pytest.StashKey[list]()


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture(scope="session")
def toy4():
    """Small 4-class dataset at 10 dB."""
    return generate_dataset(["BPSK", "QPSK", "PAM4", "QAM16"], 60, ChannelSpec(10.0), length=128, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
