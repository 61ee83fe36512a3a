"""Stationary covariance functions for latent-force priors.

Hyperparameters are stored unconstrained and mapped through softplus, so
every one of them stays strictly positive under gradient updates.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .numcore import DTYPE, as_tensor, inv_softplus, softplus


class DimensionMismatch(ValueError):
    pass


def rbf(x, x2, lengthscales, variance) -> torch.Tensor:
    """sigma^2 * exp(-0.5 * sum_d (x_d - x2_d)^2 / l_d^2) for two points."""
    x, x2, ls = as_tensor(x).reshape(-1), as_tensor(x2).reshape(-1), as_tensor(lengthscales).reshape(-1)
    if not (x.shape == x2.shape == ls.shape):
        raise DimensionMismatch(f"point dims {x.shape[0]}, {x2.shape[0]} vs {ls.shape[0]} lengthscales")
    return as_tensor(variance) * torch.exp(-0.5 * (((x - x2) / ls) ** 2).sum())


def periodic(t, t2, lengthscale, period, variance) -> torch.Tensor:
    r = torch.abs(as_tensor(t) - as_tensor(t2))
    return as_tensor(variance) * torch.exp(-2.0 * torch.sin(math.pi * r / as_tensor(period)) ** 2 / as_tensor(lengthscale) ** 2)


class Kernel(nn.Module):
    """Base class; subclasses implement ``forward(X, X2) -> (N, M)``."""

    input_dim: int = 1

    def _check(self, X: torch.Tensor, X2: torch.Tensor):
        X = as_tensor(X)
        X2 = as_tensor(X2)
        if X.dim() == 1:
            X = X[:, None]
        if X2.dim() == 1:
            X2 = X2[:, None]
        if X.shape[1] != self.input_dim or X2.shape[1] != self.input_dim:
            raise DimensionMismatch(
                f"kernel expects {self.input_dim}-dim inputs, got {X.shape[1]} and {X2.shape[1]}")
        return X, X2

    def diag(self, X) -> torch.Tensor:
        X = as_tensor(X)
        return self.variance.expand(X.shape[0]).clone()

    @property
    def variance(self) -> torch.Tensor:
        return softplus(self.raw_variance)


class RBF(Kernel):
    """RBF kernel; one lengthscale per input dimension (anisotropic when D > 1)."""

    def __init__(self, lengthscales=(1.0,), variance: float = 1.0):
        super().__init__()
        ls = as_tensor(lengthscales).reshape(-1)
        self.input_dim = ls.shape[0]
        self.raw_lengthscales = nn.Parameter(inv_softplus(ls))
        self.raw_variance = nn.Parameter(inv_softplus(torch.tensor(float(variance), dtype=DTYPE)))

    @property
    def lengthscales(self) -> torch.Tensor:
        return softplus(self.raw_lengthscales)

    def forward(self, X, X2) -> torch.Tensor:
        X, X2 = self._check(X, X2)
        ls = self.lengthscales
        d2 = (((X[:, None, :] - X2[None, :, :]) / ls) ** 2).sum(-1)
        return self.variance * torch.exp(-0.5 * d2)


class Periodic(Kernel):
    """Standard exp-sine-squared kernel on scalar inputs."""

    def __init__(self, lengthscale: float = 1.0, period: float = 1.0, variance: float = 1.0):
        super().__init__()
        self.input_dim = 1
        self.raw_lengthscale = nn.Parameter(inv_softplus(torch.tensor(float(lengthscale), dtype=DTYPE)))
        self.raw_period = nn.Parameter(inv_softplus(torch.tensor(float(period), dtype=DTYPE)))
        self.raw_variance = nn.Parameter(inv_softplus(torch.tensor(float(variance), dtype=DTYPE)))

    @property
    def lengthscale(self) -> torch.Tensor:
        return softplus(self.raw_lengthscale)

    @property
    def period(self) -> torch.Tensor:
        return softplus(self.raw_period)

    def forward(self, X, X2) -> torch.Tensor:
        X, X2 = self._check(X, X2)
        r = torch.abs(X[:, None, 0] - X2[None, :, 0])
        s = torch.sin(math.pi * r / self.period)
        return self.variance * torch.exp(-2.0 * s ** 2 / self.lengthscale ** 2)


def kernel_matrix(X, X2, kernel: Kernel) -> torch.Tensor:
    return kernel(X, X2)


def smallest_spacing(X) -> np.ndarray:
    """Smallest nonzero distance between distinct coordinates, per dimension."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    out = []
    for col in X.T:
        u = np.unique(col)
        gaps = np.diff(u)
        out.append(gaps.min() if gaps.size else 1.0)
    return np.array(out)


def periodogram_period(t, y, pad: int = 8) -> float:
    """Period of the strongest non-constant frequency in a uniformly sampled series."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(t.size, -1).mean(1)
    y = y - y.mean()
    n = pad * t.size
    power = np.abs(np.fft.rfft(y, n)) ** 2
    freqs = np.fft.rfftfreq(n, t[1] - t[0])
    k = 1 + int(np.argmax(power[1:]))
    return float(1.0 / freqs[k])


def make_kernel(name: str, X, lengthscale=None, period=None, variance: float = 1.0) -> Kernel:
    """Build a kernel with data-driven initial hyperparameters.

    Lengthscales default to the smallest spacing between data inputs in each
    dimension; the period defaults to half the input span.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    ls = smallest_spacing(X) if lengthscale is None else np.broadcast_to(np.asarray(lengthscale, float), (X.shape[1],))
    if name == "rbf":
        return RBF(ls, variance)
    if name == "periodic":
        if X.shape[1] != 1:
            raise DimensionMismatch("periodic kernel takes scalar inputs")
        p = 0.5 * float(X.max() - X.min()) if period is None else float(period)
        return Periodic(float(ls[0]), p, variance)
    raise ValueError(f"unknown kernel {name!r}")
