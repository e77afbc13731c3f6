import numpy as np
import pytest

from eegics.config import TrainConfig
from eegics.data import SynthParams, synth_generate
from eegics.model import Architecture

TINY_ARCH = Architecture(conv1_maps=4, conv1_kernel=8, conv2_maps=8, conv2_kernel=4,
                         pointwise_maps=8)

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_ds():
    return synth_generate(SynthParams(n_subjects=3, per_subject=40, channels=6, timepoints=64,
                                      planted=2, amplitude=2.0, seed=3))


@pytest.fixture(scope="session")
def tiny_cfg():
    return TrainConfig(epochs=15, lr=1e-2, batch_size=10, seed=1, n_channels=2, arch=TINY_ARCH)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
