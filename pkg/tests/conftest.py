import numpy as np
import pytest

from canonseg import tensor as T


@pytest.fixture(autouse=True, scope="session")
def _debug_checks():
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
