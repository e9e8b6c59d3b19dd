import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from litemeta import autodiff as ad

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _float64_and_fresh_tape():
    ad.set_default_dtype(np.float64)
    ad.reset_default_tape()
    yield
    ad.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
