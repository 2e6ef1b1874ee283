import numpy as np
import pytest

from lkdnet import precision


@pytest.fixture(autouse=True)
def _reset_precision():
    # Tests that switch to f64 must not leak the mode into later tests.
    prev = precision.dtype()
    yield
    precision.set_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)
