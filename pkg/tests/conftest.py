import numpy as np
import pytest

from rsbench.raster import RasterImage


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, channels=3, height=8, width=8, lo=0.0, hi=255.0):
    data = rng.uniform(lo, hi, size=(channels, height, width)).astype(np.float32)
    return RasterImage(data=data)
