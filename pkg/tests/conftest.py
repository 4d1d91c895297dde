import numpy as np
import pytest

from ropo.policy import PolicyConfig, PolicyModel

ACCEPTANCE_RESULTS: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    return PolicyConfig(vocab_size=11, d_model=6, context_length=16, num_layers=2, mlp_hidden=8)


@pytest.fixture
def tiny_model(tiny_config):
    return PolicyModel.init(tiny_config, seed=3)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
