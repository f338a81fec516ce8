import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.data import generate_synthetic  # noqa: E402
from src.model import ModelConfig  # noqa: E402
from src.tensor import default_dtype, get_tape, make_rng  # noqa: E402


@pytest.fixture(autouse=True)
def clean_tape():
    get_tape().reset()
    yield
    get_tape().reset()


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def float64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def micro_config():
    """Smallest configuration exercising every component: shifted windows, CATM at three levels, all AFB policies"""
    return ModelConfig.from_profile(
        "custom", input_size=32, embed_dim=8, depths=(2, 2, 2, 2), heads=(1, 1, 2, 2), window=4
    )


@pytest.fixture
def synthetic_samples():
    return generate_synthetic(8, 32, make_rng(7))
