"""Shared fixtures for confmaplib tests"""

import numpy as np
import pytest

from confmaplib.config import Settings
from confmaplib.confidence import RwParams
from confmaplib.grids import Image2D, LabelMap


@pytest.fixture
def settings():
    """A Settings instance with all defaults."""
    return Settings()


@pytest.fixture
def rng():
    """A seeded generator so every test run sees the same data."""
    return np.random.default_rng(1234)


@pytest.fixture
def params():
    """Default random-walk parameters."""
    return RwParams()


def uniform_image(height, width, value=0.5):
    """A constant-intensity Image2D."""
    return Image2D(data=np.full((height, width), value))


def random_image(rng, height, width):
    """An Image2D of uniform noise in [0, 1]."""
    return Image2D(data=rng.random((height, width)))


def square_labels(size, lo, hi, num_classes=2):
    """A size x size LabelMap with class 1 on rows/cols [lo, hi)."""
    data = np.zeros((size, size), dtype=np.int64)
    data[lo:hi, lo:hi] = 1
    return LabelMap(data=data, num_classes=num_classes)
