import numpy as np
import pytest

from hjbkit.problems import LqrProblem, RigidBodyProblem


@pytest.fixture(scope="session")
def rigid():
    return RigidBodyProblem()


@pytest.fixture(scope="session")
def lqr():
    return LqrProblem()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
