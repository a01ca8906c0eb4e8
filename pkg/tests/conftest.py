import numpy as np
import pytest
import torch

from gblum.logdata import SyntheticConfig, generate_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_config():
    return SyntheticConfig(num_users=150, days=10, mean_events_per_day=20.0)


@pytest.fixture(scope="session")
def small_corpus(small_config):
    return generate_corpus(small_config, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
