import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("canopy", max_examples=40, deadline=None)
settings.load_profile("canopy")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
