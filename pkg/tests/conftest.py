import numpy as np
import pytest
import torch

from structsr.schedule import make_linear_schedule


@pytest.fixture(scope="session")
def default_schedule():
    return make_linear_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_single_thread():
    torch.set_num_threads(torch.get_num_threads())
    yield
