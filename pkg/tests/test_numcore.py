import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentforce.numcore import (NonFiniteGradient, NotPositiveDefinite, SingularSystem, check_gradients, cho_solve,
                                 cholesky, inv_softplus, logdet_from_cholesky, softplus, solve_tridiagonal,
                                 tridiagonal_dense, tridiagonal_matvec)

from conftest import dominant_tridiagonal


def t(a):
    return torch.tensor(a, dtype=torch.float64)


def test_cholesky_identity():
    assert torch.equal(cholesky(torch.eye(2, dtype=torch.float64), 0.0), torch.eye(2, dtype=torch.float64))


def test_cholesky_reconstructs():
    a = t([[4.0, 2.0], [2.0, 3.0]])
    L = cholesky(a, 0.0)
    assert torch.allclose(L @ L.T, a, atol=1e-12, rtol=0)
    assert float(L[0, 1]) == 0.0


def test_cholesky_indefinite_raises():
    with pytest.raises(NotPositiveDefinite):
        cholesky(t([[1.0, 2.0], [2.0, 1.0]]), 0.0)


def test_cholesky_jitter_escalation_rescues_singular_psd():
    # rank one: fails without jitter, succeeds once jitter is added
    a = t([[1.0, 1.0], [1.0, 1.0]])
    L = cholesky(a, 1e-5)
    assert torch.allclose(L @ L.T, a, atol=1e-3)


def test_logdet_matches_slogdet(rng):
    A = rng.standard_normal((6, 6))
    a = t(A @ A.T + 6 * np.eye(6))
    assert float(logdet_from_cholesky(cholesky(a, 0.0))) == pytest.approx(np.linalg.slogdet(a.numpy())[1], abs=1e-10)


@pytest.mark.parametrize("n", [1, 5, 17, 64])
def test_cho_solve_matches_dense_inverse(rng, n):
    A = rng.standard_normal((n, n))
    a = A @ A.T + n * np.eye(n)
    b = rng.standard_normal((n, 3))
    x = cho_solve(cholesky(t(a), 0.0), t(b)).numpy()
    assert np.allclose(x, np.linalg.inv(a) @ b, atol=1e-8, rtol=0)


def test_tridiagonal_identity():
    r = t([1.0, -2.0, 3.5])
    x = solve_tridiagonal(t([0.0, 0.0]), t([1.0, 1.0, 1.0]), t([0.0, 0.0]), r)
    assert torch.equal(x, r)


def test_tridiagonal_matches_dense_5x5(rng):
    lo, d, up = dominant_tridiagonal(rng, 5)
    b = rng.standard_normal(5)
    x = solve_tridiagonal(t(lo), t(d), t(up), t(b)).numpy()
    dense = tridiagonal_dense(t(lo), t(d), t(up)).numpy()
    assert np.allclose(x, np.linalg.solve(dense, b), atol=1e-10, rtol=0)


def test_tridiagonal_100_random_systems(rng):
    for _ in range(100):
        n = int(rng.integers(2, 40))
        lo, d, up = dominant_tridiagonal(rng, n)
        b = rng.standard_normal((n, 2))
        x = solve_tridiagonal(t(lo), t(d), t(up), t(b)).numpy()
        dense = tridiagonal_dense(t(lo), t(d), t(up)).numpy()
        assert np.allclose(x, np.linalg.solve(dense, b), atol=1e-10, rtol=0)


def test_tridiagonal_zero_pivot():
    with pytest.raises(SingularSystem):
        solve_tridiagonal(t([0.0]), t([0.0, 1.0]), t([0.0]), t([1.0, 1.0]))


def test_matvec_matches_dense(rng):
    lo, d, up = dominant_tridiagonal(rng, 7)
    x = rng.standard_normal(7)
    dense = tridiagonal_dense(t(lo), t(d), t(up)).numpy()
    assert np.allclose(tridiagonal_matvec(t(lo), t(d), t(up), t(x)).numpy(), dense @ x, atol=1e-12)


def test_tridiagonal_gradient_all_inputs(rng):
    n = 6
    lo, d, up = dominant_tridiagonal(rng, n)
    b = rng.standard_normal(n)
    w = t(rng.standard_normal(n))
    x0 = t(np.concatenate([lo, d, up, b]))

    def f(x):
        a, dd, u, r = x[:n - 1], x[n - 1:2 * n - 1], x[2 * n - 1:3 * n - 2], x[3 * n - 2:]
        return (w * solve_tridiagonal(a, dd, u, r)).sum()

    assert check_gradients(f, x0) < 1e-3


def test_check_gradients_square():
    assert check_gradients(lambda x: (x ** 2).sum(), t([3.0])) < 1e-8


def test_check_gradients_kink_uses_zero_subgradient():
    # autograd picks 0 at the kink; the central difference is 0 as well
    assert check_gradients(lambda x: x.abs().sum(), t([0.0])) == 0.0


def test_check_gradients_eps_range():
    with pytest.raises(ValueError):
        check_gradients(lambda x: x.sum(), t([1.0]), eps=1e-1)


def test_check_gradients_nonfinite():
    with pytest.raises(NonFiniteGradient):
        check_gradients(lambda x: torch.sqrt(x).sum(), t([0.0]), eps=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=1e-6, max_value=30.0))
def test_softplus_inverse_roundtrip(y):
    assert float(softplus(inv_softplus(t(y)))) == pytest.approx(y, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=2, max_value=30), st.integers(min_value=0, max_value=2**31))
def test_tridiagonal_property(n, seed):
    rng = np.random.default_rng(seed)
    lo, d, up = dominant_tridiagonal(rng, n)
    b = rng.standard_normal(n)
    x = solve_tridiagonal(t(lo), t(d), t(up), t(b)).numpy()
    assert np.allclose(tridiagonal_dense(t(lo), t(d), t(up)).numpy() @ x, b, atol=1e-10)
