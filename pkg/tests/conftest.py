import numpy as np
import pytest

from quasiconf.raster import ImageRGB


def flat_image(size, sigma, seed=0, level=0.5):
    """Constant gray image plus i.i.d. Gaussian noise; sigma may be per channel."""
    rng = np.random.default_rng(seed)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (3,))
    return ImageRGB(level + rng.standard_normal((size, size, 3)) * sig)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
