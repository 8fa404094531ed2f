import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

SEEDS = list(range(10))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk():
    from trikd.config import DESK
    return DESK


@pytest.fixture(scope="session")
def desk_model(desk):
    from trikd.model import TriKD
    return TriKD.build(desk, 0)
