import sys
from pathlib import Path

import numpy as np
import pytest

from thermoseg import config

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def _reset_dtype():
    config.set_dtype("float32")
    yield
    config.set_dtype("float32")


@pytest.fixture
def f64():
    with config.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
