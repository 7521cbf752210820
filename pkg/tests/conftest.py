import numpy as np
import pytest

from config import Config
from utils.datasets import Dataset, gen_synthetic, split_semisup
from utils.model import Model, mlp_init
from utils.tensor import Tensor


@pytest.fixture(autouse=True)
def quiet_progress(monkeypatch):
    monkeypatch.setattr(Config, "SHOW_PROGRESS", False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model() -> Model:
    return mlp_init([2, 8, 2], seed=0)


def linear_model(weights, bias=None) -> Model:
    """Single affine layer logits = x @ W + b."""
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.zeros(weights.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)
    return Model([weights.shape[0], weights.shape[1]], [Tensor(weights, requires_grad=True), Tensor(bias, requires_grad=True)])


@pytest.fixture
def moons() -> Dataset:
    return gen_synthetic("two_moons", 200, 0.03, seed=0)


@pytest.fixture
def moons_split(moons):
    return split_semisup(moons, 0.1, seed=0)
