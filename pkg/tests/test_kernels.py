import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentforce.kernels import (RBF, DimensionMismatch, Periodic, kernel_matrix, make_kernel, periodic,
                                 periodogram_period, rbf, smallest_spacing)
from latentforce.numcore import check_gradients, cholesky, softplus


def test_rbf_zero_distance():
    assert float(rbf([0.3], [0.3], [2.0], 1.7)) == pytest.approx(1.7, abs=1e-15)


def test_rbf_unit_distance():
    assert float(rbf([0.0], [1.0], [1.0], 1.0)) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert float(rbf([0.0], [1.0], [1.0], 1.0)) == pytest.approx(0.606531, abs=1e-6)


def test_rbf_large_second_lengthscale_ignores_dimension_two():
    a = float(rbf([0.0, 0.0], [1.0, 5.0], [1.0, 1e6], 1.0))
    b = float(rbf([0.0], [1.0], [1.0], 1.0))
    assert abs(a - b) < 1e-6


def test_rbf_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        rbf([0.0, 1.0], [0.0, 1.0], [1.0], 1.0)
    with pytest.raises(DimensionMismatch):
        RBF([1.0, 1.0])(torch.zeros(3, 1, dtype=torch.float64), torch.zeros(3, 1, dtype=torch.float64))


def test_periodic_examples():
    assert float(periodic(1.0, 1.0, 0.7, 2.0, 1.3)) == pytest.approx(1.3)
    assert float(periodic(0.0, 2.0, 0.7, 2.0, 1.3)) == pytest.approx(1.3, abs=1e-12)
    assert float(periodic(0.0, 1.0, 1.0, 2.0, 1.0)) == pytest.approx(math.exp(-2.0), abs=1e-12)
    assert float(periodic(0.0, 1.0, 1.0, 2.0, 1.0)) == pytest.approx(0.135335, abs=1e-6)


def test_one_point_matrix():
    k = RBF([0.5], 2.5)
    K = kernel_matrix(torch.tensor([[0.1]], dtype=torch.float64), torch.tensor([[0.1]], dtype=torch.float64), k)
    assert K.shape == (1, 1)
    assert float(K[0, 0]) == pytest.approx(2.5)


@pytest.mark.parametrize("kern", [RBF([0.4], 1.2), Periodic(0.8, 1.5, 0.9)])
def test_matrix_symmetric_and_pointwise(rng, kern):
    X = torch.tensor(rng.uniform(0, 3, (10, 1)))
    K = kernel_matrix(X, X, kern)
    assert float((K - K.T).abs().max()) == 0.0
    for i in range(10):
        for j in range(10):
            if isinstance(kern, RBF):
                v = rbf(X[i], X[j], kern.lengthscales, kern.variance)
            else:
                v = periodic(X[i, 0], X[j, 0], kern.lengthscale, kern.period, kern.variance)
            assert float(K[i, j]) == pytest.approx(float(v), abs=1e-14)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", ["rbf", "periodic"])
def test_gram_passes_cholesky(seed, name):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 65))
    X = rng.uniform(0, 10, n)
    k = make_kernel(name, np.sort(X))
    L = cholesky(k(torch.tensor(X), torch.tensor(X)), 1e-5)
    assert torch.isfinite(L).all()


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 2**31))
def test_stationarity(shift, seed):
    rng = np.random.default_rng(seed)
    X = torch.tensor(rng.uniform(-3, 3, (6, 2)))
    k = RBF([0.7, 1.9], 1.1)
    K1 = k(X, X)
    K2 = k(X + shift, X + shift)
    assert torch.allclose(K1, K2, atol=1e-10)
    Xp = torch.tensor(rng.uniform(-3, 3, (6, 1)))
    p = Periodic(0.6, 1.7, 1.0)
    assert torch.allclose(p(Xp, Xp), p(Xp + shift, Xp + shift), atol=1e-8)


def test_hyperparameter_gradients(rng):
    X = torch.tensor(rng.uniform(0, 4, (5, 1)))
    w = torch.tensor(rng.standard_normal((5, 5)))
    for kern in (RBF([0.8], 1.3), Periodic(0.9, 2.2, 0.7)):
        names = [n for n, _ in kern.named_parameters()]
        x0 = torch.cat([p.detach().reshape(-1) for p in kern.parameters()])

        def f(x, kern=kern, names=names):
            sizes = [p.numel() for p in kern.parameters()]
            new = dict(zip(names, torch.split(x, sizes)))
            K = torch.func.functional_call(kern, new, (X, X))
            return (w * K).sum()

        assert check_gradients(f, x0) < 1e-3


def test_make_kernel_initialisation():
    t = np.array([0.0, 0.5, 2.0, 6.0])
    k = make_kernel("periodic", t)
    assert float(k.lengthscale) == pytest.approx(0.5)
    assert float(k.period) == pytest.approx(3.0)
    assert float(k.variance) == pytest.approx(1.0)
    X = np.array([[0.0, 0.0], [1.0, 0.25], [3.0, 0.5]])
    k2 = make_kernel("rbf", X)
    assert np.allclose(k2.lengthscales.detach().numpy(), [1.0, 0.25])
    with pytest.raises(DimensionMismatch):
        make_kernel("periodic", X)
    with pytest.raises(ValueError):
        make_kernel("matern", t)


def test_smallest_spacing_ignores_duplicates():
    assert smallest_spacing(np.array([0.0, 0.0, 0.3, 1.0]))[0] == pytest.approx(0.3)


def test_periodogram_period_recovers_sine():
    t = np.linspace(0, 20, 81)
    assert periodogram_period(t, np.sin(2 * np.pi * t / 5.0)) == pytest.approx(5.0, rel=0.05)


def test_parameters_stay_positive():
    k = RBF([1e-4], 1e-4)
    assert float(k.lengthscales) > 0 and float(k.variance) > 0
    with torch.no_grad():
        k.raw_variance.fill_(-50.0)
    assert float(k.variance) > 0
    assert float(softplus(torch.tensor(-50.0, dtype=torch.float64))) > 0
