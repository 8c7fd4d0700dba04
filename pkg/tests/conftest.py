import numpy as np
import pytest

from kalmis.models import ar1, sqrtdrift


@pytest.fixture
def ar1_model():
    return ar1.make_ar1(ar1.Ar1Params(gamma=0.9, alpha=3.0))


@pytest.fixture
def ar1_theta():
    return np.array([0.9, 3.0])


@pytest.fixture
def sqrt_model():
    return sqrtdrift.build(np.array([0.008, 5.0]), {})
