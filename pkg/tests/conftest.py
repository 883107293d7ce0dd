"""Shared fixtures and independent numerical oracles.

The finite-difference helper here is deliberately separate from the
library's own gradcheck so gradient tests have an oracle that does not
share code with the implementation under test.
"""

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference(f, arrays, which, eps=1e-6):
    """Central-difference gradient of scalar f(*arrays) w.r.t. arrays[which].

    Pure numpy; arrays are float64 copies so the perturbation never leaks.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(*arrays)
        flat[i] = orig - eps
        lo = f(*arrays)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())
