import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentforce.interp import DuplicateKnot, NonMonotonicKnots, eval_derivative, fit_natural_cubic, spline_coefficients


def test_two_points_is_a_line():
    s = fit_natural_cubic([0.0, 2.0], [1.0, 5.0])
    q = np.linspace(0, 2, 7)
    assert np.allclose(s(q), 1.0 + 2.0 * q, atol=1e-14)
    assert np.allclose(s.second_derivative(q), 0.0)


def test_linear_reproduction_and_slope(rng):
    t = np.sort(rng.uniform(0, 10, 12))
    s = fit_natural_cubic(t, 3.0 - 0.7 * t)
    q = np.linspace(t[0], t[-1], 101)
    assert np.allclose(s(q), 3.0 - 0.7 * q, atol=1e-12)
    assert np.allclose(eval_derivative(s, q), -0.7, atol=1e-12)


def test_sine_endpoint_curvature_and_derivative():
    t = np.linspace(0, 2 * np.pi, 20)
    s = fit_natural_cubic(t, np.sin(t))
    assert abs(s.second_derivative(t[0])) < 1e-10
    assert abs(s.second_derivative(t[-1] - 1e-15)) < 1e-10
    interior = np.linspace(t[1], t[-2], 200)
    assert np.max(np.abs(s.derivative(interior) - np.cos(interior))) < 0.05


def test_continuity_at_knots(rng):
    t = np.sort(rng.uniform(0, 5, 9))
    s = fit_natural_cubic(t, rng.standard_normal(9))
    for k in range(1, 8):
        h = t[k] - t[k - 1]
        left = (s.b[k - 1] + 2 * s.c[k - 1] * h + 3 * s.d[k - 1] * h ** 2,
                2 * s.c[k - 1] + 6 * s.d[k - 1] * h)
        assert left[0] == pytest.approx(s.b[k], abs=1e-10)
        assert left[1] == pytest.approx(2 * s.c[k], abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31))
def test_interpolates_knots(n, seed):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.1, 1.0, n))
    y = rng.standard_normal(n)
    assert np.allclose(fit_natural_cubic(t, y)(t), y, atol=1e-12)


def test_multiple_series_share_knots(rng):
    t = np.linspace(0, 1, 6)
    Y = rng.standard_normal((6, 3))
    s = fit_natural_cubic(t, Y)
    q = np.linspace(0, 1, 11)
    for j in range(3):
        assert np.allclose(s(q)[:, j], fit_natural_cubic(t, Y[:, j])(q), atol=1e-13)


def test_bad_knots():
    with pytest.raises(DuplicateKnot):
        fit_natural_cubic([0.0, 1.0, 1.0], [0.0, 1.0, 2.0])
    with pytest.raises(NonMonotonicKnots):
        fit_natural_cubic([0.0, 2.0, 1.0], [0.0, 1.0, 2.0])


def test_out_of_range_clamps_to_boundary_cubic():
    t = np.linspace(0, 1, 5)
    s = fit_natural_cubic(t, t ** 2)
    k = 0
    tau = -0.1
    assert s(-0.1) == pytest.approx(s.a[k] + tau * (s.b[k] + tau * (s.c[k] + tau * s.d[k])))


def test_torch_path_matches_numpy_and_is_differentiable(rng):
    t = np.linspace(0, 3, 7)
    y = rng.standard_normal(7)
    ref = spline_coefficients(t, y)
    yt = torch.tensor(y, requires_grad=True)
    out = spline_coefficients(t, yt)
    for a, b in zip(ref, out):
        assert np.allclose(a, b.detach().numpy(), atol=1e-13)
    out[1].sum().backward()
    assert yt.grad is not None and torch.isfinite(yt.grad).all()


def test_linear_cost_scaling():
    def cost(n):
        t = np.linspace(0, 1, n)
        y = np.sin(7 * t)
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            fit_natural_cubic(t, y)
            best = min(best, time.perf_counter() - t0)
        return best

    assert cost(10_000) / cost(1_000) < 15
