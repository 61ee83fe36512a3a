"""Natural cubic splines for derivative estimation from sparse data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .numcore import DTYPE, solve_tridiagonal


class NonMonotonicKnots(ValueError):
    pass


class DuplicateKnot(ValueError):
    pass


@dataclass(frozen=True)
class CubicSpline:
    """Piecewise cubic a + b*tau + c*tau^2 + d*tau^3 with tau = t - knots[k].

    Coefficient arrays are (N-1,) for a scalar series or (N-1, K) when K
    series share the knots.
    """

    knots: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def _locate(self, t):
        t = np.asarray(t, dtype=np.float64)
        k = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, len(self.knots) - 2)
        tau = t - self.knots[k]
        if self.a.ndim > 1:
            tau = tau[..., None]
        return k, tau

    def __call__(self, t) -> np.ndarray:
        k, tau = self._locate(t)
        return self.a[k] + tau * (self.b[k] + tau * (self.c[k] + tau * self.d[k]))

    def derivative(self, t) -> np.ndarray:
        k, tau = self._locate(t)
        return self.b[k] + tau * (2 * self.c[k] + 3 * tau * self.d[k])

    def second_derivative(self, t) -> np.ndarray:
        k, tau = self._locate(t)
        return 2 * self.c[k] + 6 * tau * self.d[k]


def _check_knots(t: np.ndarray):
    if t.ndim != 1 or t.shape[0] < 2:
        raise ValueError("need at least two knots")
    gaps = np.diff(t)
    if (gaps == 0).any():
        raise DuplicateKnot("repeated knot")
    if (gaps < 0).any():
        raise NonMonotonicKnots("knots must be strictly increasing")


def _second_derivatives(t: np.ndarray, y):
    """Knot second derivatives of the natural spline (zero at both ends).

    Works on numpy arrays or torch tensors (the torch path is differentiable
    in ``y``). ``y`` is (N,) or (N, K).
    """
    n = t.shape[0]
    h = np.diff(t)
    is_torch = isinstance(y, torch.Tensor)
    if n == 2:
        return torch.zeros_like(y) if is_torch else np.zeros_like(y, dtype=np.float64)
    diag = 2.0 * (h[:-1] + h[1:])
    off = h[1:-1]
    yt = y if is_torch else torch.as_tensor(np.asarray(y, dtype=np.float64))
    hh = torch.tensor(h, dtype=DTYPE)
    hh = hh.reshape((-1,) + (1,) * (yt.dim() - 1))
    slope = (yt[1:] - yt[:-1]) / hh
    rhs = 6.0 * (slope[1:] - slope[:-1])
    inner = solve_tridiagonal(off, diag, off, rhs)
    zero = torch.zeros_like(yt[:1])
    m = torch.cat([zero, inner, zero])
    return m if is_torch else m.detach().numpy()


def spline_coefficients(t: np.ndarray, y):
    """(a, b, c, d) per interval; torch in, torch out (differentiable)."""
    h = np.diff(t)
    m = _second_derivatives(t, y)
    if isinstance(y, torch.Tensor):
        h = torch.tensor(h, dtype=DTYPE).reshape((-1,) + (1,) * (y.dim() - 1))
    else:
        h = h.reshape((-1,) + (1,) * (np.ndim(y) - 1))
    a = y[:-1]
    b = (y[1:] - y[:-1]) / h - h * (2 * m[:-1] + m[1:]) / 6.0
    c = m[:-1] / 2.0
    d = (m[1:] - m[:-1]) / (6.0 * h)
    return a, b, c, d


def fit_natural_cubic(t, y) -> CubicSpline:
    """Fit a natural cubic spline through (t, y) in O(N) via a tridiagonal solve."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_knots(t)
    if y.shape[0] != t.shape[0]:
        raise ValueError("t and y lengths differ")
    a, b, c, d = spline_coefficients(t, y)
    return CubicSpline(t, a, b, c, d)


def eval_derivative(spline: CubicSpline, t) -> np.ndarray:
    return spline.derivative(t)
