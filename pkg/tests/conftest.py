import numpy as np
import pytest

from slsr.data import make_synthetic_corpus


@pytest.fixture(scope="session")
def corpus():
    return make_synthetic_corpus(30, 3, 10, 32, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
