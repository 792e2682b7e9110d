import os

# small-matrix workloads run faster single threaded, and the desk-scale
# acceptance runs train two processes wide; pin BLAS before numpy loads
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(f, x0, eps=1e-5):
    """Central finite difference of scalar f at scalar coordinate x0."""
    return (f(x0 + eps) - f(x0 - eps)) / (2 * eps)


def random_orthogonal(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
