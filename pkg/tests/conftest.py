import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedalign.ot import DiscreteMeasure

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_measure(rng, n, support=None):
    support = rng.random(n) if support is None else support
    return DiscreteMeasure(support, rng.dirichlet(np.ones(n)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid64():
    return np.linspace(0.0, 1.0, 64)
