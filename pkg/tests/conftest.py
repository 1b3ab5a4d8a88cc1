import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def spin1():
    s2 = np.sqrt(2.0)
    sx = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex) / s2
    sy = np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex) / s2
    sz = np.diag([1.0, 0.0, -1.0]).astype(complex)
    return sx, sy, sz


def dense_levels(b_vec_nv, d=2870.0, g=28.0):
    """Reference eigenvalues of D Sz^2 + g B.S from a generic complex matrix."""
    sx, sy, sz = spin1()
    bx, by, bz = b_vec_nv
    h = d * sz @ sz + g * (bx * sx + by * sy + bz * sz)
    return np.linalg.eigvalsh(h)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
