import numpy as np
import pytest

from twopass_kws.nn import using_dtype


@pytest.fixture
def f64():
    """Run a test under float64 (required for finite-difference checks)."""
    with using_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
