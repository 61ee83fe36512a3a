"""Dense and tridiagonal linear algebra on top of torch autograd.

All tensors are float64. Reverse-mode gradients come from torch's recorded
graph; the tridiagonal solve registers its own adjoint so FEM time stepping
never materialises a dense matrix.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

DTYPE = torch.float64
DEFAULT_JITTER = 1e-5
JITTER_RETRIES = 3
PIVOT_TOL = 1e-14


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class SingularSystem(np.linalg.LinAlgError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.softplus(x)


def inv_softplus(y) -> torch.Tensor:
    """Inverse of softplus, safe for large arguments."""
    y = as_tensor(y)
    return y + torch.log(-torch.expm1(-y))


def cholesky(a, jitter: float = DEFAULT_JITTER) -> torch.Tensor:
    """Lower Cholesky factor of ``a + jitter*I`` with jitter escalation.

    On failure the jitter is multiplied by ten, up to three retries. A zero
    jitter therefore never escalates. Works on batches (..., n, n).
    """
    a = as_tensor(a)
    n = a.shape[-1]
    eye = torch.eye(n, dtype=DTYPE)
    j = float(jitter)
    for _ in range(JITTER_RETRIES + 1):
        L, info = torch.linalg.cholesky_ex(a + j * eye)
        if not bool((info != 0).any()) and bool(torch.isfinite(L).all()):
            return L
        j *= 10.0
    raise NotPositiveDefinite(f"matrix not positive definite (final jitter {j / 10:g})")


def logdet_from_cholesky(L: torch.Tensor) -> torch.Tensor:
    return 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)


def cho_solve(L: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.cholesky_solve(b, L)


def _thomas(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    # rhs is (n,) or (n, k); elimination without pivoting
    n = diag.shape[0]
    c = np.empty(max(n - 1, 0))
    d = np.empty_like(rhs, dtype=np.float64)
    piv = diag[0]
    if abs(piv) < PIVOT_TOL:
        raise SingularSystem("zero pivot at row 0")
    if n > 1:
        c[0] = upper[0] / piv
    d[0] = rhs[0] / piv
    for i in range(1, n):
        piv = diag[i] - lower[i - 1] * c[i - 1]
        if abs(piv) < PIVOT_TOL:
            raise SingularSystem(f"zero pivot at row {i}")
        if i < n - 1:
            c[i] = upper[i] / piv
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / piv
    x = d
    for i in range(n - 2, -1, -1):
        x[i] = x[i] - c[i] * x[i + 1]
    return x


class _TridiagonalSolve(torch.autograd.Function):
    """x = A^{-1} b for tridiagonal A; b may carry trailing batch columns."""

    @staticmethod
    def forward(ctx, lower, diag, upper, rhs):
        lo, di, up = (t.detach().numpy() for t in (lower, diag, upper))
        x = torch.from_numpy(_thomas(lo, di, up, rhs.detach().numpy()))
        ctx.save_for_backward(lower, diag, upper, x)
        return x

    @staticmethod
    def backward(ctx, grad_x):
        lower, diag, upper, x = ctx.saved_tensors
        lo, di, up = (t.detach().numpy() for t in (lower, diag, upper))
        # A^T swaps the off-diagonals
        bbar = torch.from_numpy(_thomas(up, di, lo, grad_x.detach().numpy()))
        if x.dim() == 1:
            gd = -bbar * x
            gl = -bbar[1:] * x[:-1]
            gu = -bbar[:-1] * x[1:]
        else:
            gd = -(bbar * x).sum(-1)
            gl = -(bbar[1:] * x[:-1]).sum(-1)
            gu = -(bbar[:-1] * x[1:]).sum(-1)
        return gl, gd, gu, bbar


def solve_tridiagonal(lower, diag, upper, rhs) -> torch.Tensor:
    """Solve a tridiagonal system with the Thomas algorithm.

    ``lower`` and ``upper`` hold the sub- and super-diagonal (length n-1).
    ``rhs`` is (n,) or (n, k). Differentiable in all four arguments; the
    adjoint of ``A x = b`` is ``b_bar = A^{-T} x_bar`` and
    ``A_bar = -b_bar x^T`` restricted to the three bands.
    """
    lower, diag, upper, rhs = (as_tensor(v) for v in (lower, diag, upper, rhs))
    n = diag.shape[0]
    if lower.shape[0] != n - 1 or upper.shape[0] != n - 1 or rhs.shape[0] != n:
        raise ValueError("inconsistent tridiagonal band lengths")
    return _TridiagonalSolve.apply(lower, diag, upper, rhs)


def tridiagonal_matvec(lower, diag, upper, x: torch.Tensor) -> torch.Tensor:
    """A @ x for banded A; x is (n,) or (n, k)."""
    y = diag.reshape((-1,) + (1,) * (x.dim() - 1)) * x
    if diag.shape[0] > 1:
        shp = (-1,) + (1,) * (x.dim() - 1)
        y = y + torch.cat([upper.reshape(shp) * x[1:], torch.zeros_like(x[:1])])
        y = y + torch.cat([torch.zeros_like(x[:1]), lower.reshape(shp) * x[:-1]])
    return y


def tridiagonal_dense(lower, diag, upper) -> torch.Tensor:
    return torch.diag(as_tensor(diag)) + torch.diag(as_tensor(lower), -1) + torch.diag(as_tensor(upper), 1)


def check_gradients(f: Callable[[torch.Tensor], torch.Tensor], params, eps: float = 1e-4) -> float:
    """Max relative error between autograd and central differences.

    Error per component is |analytic - fd| / (|fd| + 1e-8). At a kink the
    analytic value is whatever subgradient autograd picks (0 for ``abs``).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    x = as_tensor(params).detach().clone().reshape(-1)
    xg = x.clone().requires_grad_(True)
    out = f(xg)
    (grad,) = torch.autograd.grad(out, xg, allow_unused=True)
    grad = torch.zeros_like(x) if grad is None else grad
    if not bool(torch.isfinite(grad).all()):
        raise NonFiniteGradient("analytic gradient has non-finite entries")
    worst = 0.0
    with torch.no_grad():
        for i in range(x.numel()):
            xp = x.clone()
            xm = x.clone()
            xp[i] += eps
            xm[i] -= eps
            fd = (float(f(xp)) - float(f(xm))) / (2 * eps)
            if not math.isfinite(fd):
                raise NonFiniteGradient(f"finite difference not finite at component {i}")
            worst = max(worst, abs(float(grad[i]) - fd) / (abs(fd) + 1e-8))
    return worst
