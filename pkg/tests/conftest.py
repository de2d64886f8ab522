import numpy as np
import pytest

from ekiconv.model import ForwardModel, InverseProblem


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def linear_problem(rng):
    A = rng.normal(size=(2, 3))
    return InverseProblem(ForwardModel.linear(A), np.eye(2), rng.normal(size=2))


def random_spd(rng, n, shift=0.5):
    X = rng.normal(size=(n, n))
    return X @ X.T + shift * np.eye(n)
