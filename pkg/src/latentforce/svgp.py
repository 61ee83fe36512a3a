"""Sparse variational GP over L independent latent forces.

Each force i has q(u_i) = N(m_i, C_i) at shared inducing inputs Z, with
C_i = L_i L_i^T parameterised by a lower-triangular factor whose diagonal
passes through softplus.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .kernels import Kernel
from .numcore import DEFAULT_JITTER, DTYPE, as_tensor, cho_solve, cholesky, inv_softplus, logdet_from_cholesky, softplus


def inducing_grid(lo, hi, counts) -> torch.Tensor:
    """Uniform lattice over a box; returns (prod(counts), D)."""
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    counts = np.atleast_1d(counts).astype(int)
    if (counts < 2).any():
        raise ValueError("need at least 2 inducing points per dimension")
    axes = [np.linspace(a, b, int(c)) for a, b, c in zip(lo, hi, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return torch.tensor(np.stack([m.reshape(-1) for m in mesh], axis=1), dtype=DTYPE)


class VariationalDist(nn.Module):
    def __init__(self, num_forces: int, num_inducing: int, init_scale: float = 0.1):
        super().__init__()
        self.num_forces = num_forces
        self.num_inducing = num_inducing
        self.mean = nn.Parameter(torch.zeros(num_forces, num_inducing, dtype=DTYPE))
        raw = torch.zeros(num_forces, num_inducing, num_inducing, dtype=DTYPE)
        raw.diagonal(dim1=-2, dim2=-1).copy_(inv_softplus(torch.tensor(init_scale, dtype=DTYPE)))
        self.raw_chol = nn.Parameter(raw)

    @property
    def chol(self) -> torch.Tensor:
        tril = torch.tril(self.raw_chol, diagonal=-1)
        return tril + torch.diag_embed(softplus(torch.diagonal(self.raw_chol, dim1=-2, dim2=-1)))

    @property
    def cov(self) -> torch.Tensor:
        L = self.chol
        return L @ L.transpose(-1, -2)

    @classmethod
    def from_moments(cls, mean, cov) -> "VariationalDist":
        mean = as_tensor(mean)
        cov = as_tensor(cov)
        if mean.dim() == 1:
            mean, cov = mean[None], cov[None]
        q = cls(mean.shape[0], mean.shape[1])
        L = torch.linalg.cholesky(cov)
        raw = torch.tril(L, -1) + torch.diag_embed(inv_softplus(torch.diagonal(L, dim1=-2, dim2=-1)))
        with torch.no_grad():
            q.mean.copy_(mean)
            q.raw_chol.copy_(raw)
        return q


def predictive(vdist: VariationalDist, Z, Xs, kernel: Kernel, jitter: float = DEFAULT_JITTER,
               full_cov: bool = True):
    """Posterior mean (L, N*) and covariance (L, N*, N*) at query inputs.

    m* = K*M Kmm^-1 m,  S* = K** + K*M Kmm^-1 (C - Kmm) Kmm^-1 KM*.
    With ``full_cov=False`` only the marginal variances (L, N*) are returned.
    """
    Kmm = kernel(Z, Z)
    Lm = cholesky(Kmm, jitter)
    Ksm = kernel(Xs, Z)
    A = cho_solve(Lm, Ksm.T).T  # K*M Kmm^-1, (N*, M)
    mean = vdist.mean @ A.T
    Lq = vdist.chol
    AL = A @ Lq  # (L, N*, M)
    if full_cov:
        Kss = kernel(Xs, Xs)
        cov = Kss - A @ Ksm.T + AL @ AL.transpose(-1, -2)
        return mean, 0.5 * (cov + cov.transpose(-1, -2))
    var = kernel.diag(Xs) - (A * Ksm).sum(-1) + (AL ** 2).sum(-1)
    return mean, var


def kl_to_prior(vdist: VariationalDist, Z, kernel: Kernel, jitter: float = DEFAULT_JITTER) -> torch.Tensor:
    """Sum over forces of KL(N(m_i, C_i) || N(0, Kmm))."""
    Kmm = kernel(Z, Z)
    Lm = cholesky(Kmm, jitter)
    M = Kmm.shape[0]
    Lq = vdist.chol
    W = torch.linalg.solve_triangular(Lm, Lq, upper=False)  # Lm^-1 Lq
    trace = (W ** 2).sum((-1, -2))
    a = torch.linalg.solve_triangular(Lm, vdist.mean[..., None], upper=False)[..., 0]
    maha = (a ** 2).sum(-1)
    kl = 0.5 * (trace + maha - M + logdet_from_cholesky(Lm) - logdet_from_cholesky(Lq))
    return kl.sum()


def sample_forces(vdist: VariationalDist, Z, Xs, kernel: Kernel, eps, jitter: float = DEFAULT_JITTER) -> torch.Tensor:
    """Reparameterised draws f = m* + chol(S* + jitter I) eps.

    ``eps`` is (N*, L) or (S, N*, L); the result has the same shape.
    """
    eps = as_tensor(eps)
    mean, cov = predictive(vdist, Z, Xs, kernel, jitter)
    Ls = cholesky(cov, jitter)  # (L, N*, N*)
    e = eps.movedim(-1, -2)  # (..., L, N*)
    f = mean + (Ls @ e[..., None])[..., 0]
    return f.movedim(-2, -1)


def gaussian_loglik(y, yhat, sigma2) -> torch.Tensor:
    """Sum of elementwise N(y | yhat, sigma2) log densities; sigma2 broadcasts over the last axis."""
    y = as_tensor(y)
    sigma2 = as_tensor(sigma2)
    r = y - yhat
    return (-0.5 * torch.log(2 * math.pi * sigma2) - r ** 2 / (2 * sigma2)).sum()
