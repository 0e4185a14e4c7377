import numpy as np
import pytest

from dact import kernels
from dact.model import ModelConfig, PolicyModel
from dact.seeding import Stream, stream_rng
from dact.taskbench import generate_dataset


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    previous = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(300, seed=7)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=6, context_vocab=4, L=6, context_len=2, embed_dim=8, layers=2, heads=2,
                       ff_dim=16, init_std=0.3, head_init_std=0.3)


@pytest.fixture
def tiny_model(tiny_config):
    return PolicyModel(tiny_config, rng=stream_rng(0, Stream.INIT))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
