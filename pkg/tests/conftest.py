import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA = os.path.join(os.path.dirname(__file__), "data")


def rect_grid(h, w, x0, y0, x1, y1):
    g = np.zeros((h, w), dtype=np.uint8)
    g[y0:y1, x0:x1] = 1
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
