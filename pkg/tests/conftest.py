import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_boxes(rng, n, lo=1.0, hi=40.0, extent=100.0):
    return np.column_stack([rng.uniform(0, extent, n), rng.uniform(0, extent, n),
                            rng.uniform(lo, hi, n), rng.uniform(lo, hi, n)])
