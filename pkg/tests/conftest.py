import asfseg  # noqa: F401  (pins BLAS thread env before numpy spins up)

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_binary(rng, shape, p=0.5):
    return (rng.random(shape) < p).astype(np.uint8)
