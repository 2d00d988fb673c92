import os

import hypothesis
import numpy as np
import pytest

from dge.schemas import EncoderConfig
from dge.tensor import precision

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def f64():
    with precision("f64"):
        yield


@pytest.fixture
def small_cfg() -> EncoderConfig:
    """8x8 token grid, two layers, all three default granularities."""
    return EncoderConfig(image_size=16, patch_size=2, channels=8, heads=2, mlp_ratio=2.0, depth=2,
                         num_classes=4)


@pytest.fixture
def rng_image():
    def make(seed: int = 0, size: int = 16):
        return np.random.default_rng(seed).normal(size=(size, size))
    return make
