import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dominant_tridiagonal(rng, n):
    """Bands (lower, diag, upper) with off-diagonals of length n - 1."""
    lower = rng.uniform(-1, 1, n - 1)
    upper = rng.uniform(-1, 1, n - 1)
    off = np.zeros(n)
    off[1:] += np.abs(lower)
    off[:-1] += np.abs(upper)
    diag = (off + rng.uniform(0.5, 2.0, n)) * rng.choice([-1.0, 1.0], n)
    return lower, diag, upper
