import numpy as np
import pytest

from gsno.sphere import make_grid


def gl_grid(lmax):
    """Smallest Gauss-Legendre grid that resolves band limit ``lmax``."""
    return make_grid("gauss-legendre", lmax + 1, 2 * lmax + 2)


def rel(a, b):
    return float(np.linalg.norm(np.ravel(a - b)) / np.linalg.norm(np.ravel(b)))


def random_unit(rng, n=None):
    v = rng.standard_normal((3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
