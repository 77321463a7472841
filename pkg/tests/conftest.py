import numpy as np
import pytest

from litedepth.engine import set_default_dtype


@pytest.fixture(autouse=True)
def _f64_default():
    # correctness tests run in 64-bit; training tests opt back into f32
    set_default_dtype("f64")
    yield
    set_default_dtype("f32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
