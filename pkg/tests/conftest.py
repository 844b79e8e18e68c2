import sys
from pathlib import Path

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import numeric as nm  # noqa: E402
from config import make_rng  # noqa: E402

hypothesis.settings.register_profile("fast", max_examples=20, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.load_profile("fast")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(autouse=True)
def float64_default():
    """Every test starts in 64-bit with gradient recording on."""
    nm.set_default_dtype("float64")
    yield
    nm.set_default_dtype("float64")


@pytest.fixture
def pose_frames(rng):
    """A (32, 18, 3) pose sequence with every joint visible."""
    coords = rng.uniform(0.05, 0.95, size=(32, 18, 2))
    return np.concatenate([coords, np.ones((32, 18, 1))], axis=-1)
