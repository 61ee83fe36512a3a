"""P1 finite elements on an interval with implicit Euler in time.

Each step solves

    ((1 + dt*lam) M + dt*D K) y^{n+1} = M (y^n + dt*S u^{n+1})

with homogeneous Dirichlet rows. M and K are tridiagonal, so every step is a
Thomas solve whose adjoint is registered in ``numcore.solve_tridiagonal``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numcore import DTYPE, as_tensor, inv_softplus, softplus, solve_tridiagonal, tridiagonal_matvec
from .odesolve import FieldTrajectory


class DegenerateElement(ValueError):
    pass


@dataclass(frozen=True)
class Mesh1D:
    vertices: np.ndarray
    spacing: float | None = None  # set for uniform meshes so element sizes are exact

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        object.__setattr__(self, "vertices", v)
        if v.ndim != 1 or v.size < 2:
            raise ValueError("mesh needs at least one element")
        if (np.diff(v) <= 0).any():
            raise ValueError("mesh vertices must be strictly increasing")

    @classmethod
    def uniform(cls, n_elements: int, length: float = 1.0) -> "Mesh1D":
        return cls(np.linspace(0.0, length, n_elements + 1), length / n_elements)

    @classmethod
    def including(cls, points, n_elements: int = 20, length: float | None = None) -> "Mesh1D":
        """Uniform mesh refined so that every data location is a vertex."""
        points = np.asarray(points, dtype=np.float64)
        lo = 0.0
        hi = float(points.max()) if length is None else float(length)
        base = np.linspace(lo, hi, n_elements + 1)
        v = np.unique(np.concatenate([base, points]))
        # merge vertices closer than a round-off tolerance, keeping data points
        keep = [v[0]]
        for x in v[1:]:
            if x - keep[-1] > 1e-9 * max(1.0, hi):
                keep.append(x)
        return cls(np.array(keep))

    @property
    def sizes(self) -> np.ndarray:
        if self.spacing is not None:
            return np.full(self.vertices.size - 1, float(self.spacing))
        return np.diff(self.vertices)

    @property
    def n_nodes(self) -> int:
        return self.vertices.size


@dataclass(frozen=True)
class FemSystem:
    """Mass and stiffness matrices stored as (lower, diag, upper) bands."""

    mesh: Mesh1D
    mass: tuple
    stiffness: tuple


def assemble(mesh: Mesh1D) -> FemSystem:
    h = mesh.sizes
    if (h < 1e-12).any():
        raise DegenerateElement("element shorter than 1e-12")
    n = mesh.n_nodes
    md = np.zeros(n)
    kd = np.zeros(n)
    # element mass (h/6)[[2,1],[1,2]], stiffness (1/h)[[1,-1],[-1,1]]
    md[:-1] += h / 3.0
    md[1:] += h / 3.0
    kd[:-1] += 1.0 / h
    kd[1:] += 1.0 / h
    mo = h / 6.0
    ko = -1.0 / h
    t = lambda a: torch.tensor(a, dtype=DTYPE)
    return FemSystem(mesh, (t(mo), t(md), t(mo)), (t(ko), t(kd), t(ko)))


class PDEParams(nn.Module):
    """Reaction-diffusion coefficients (S, lam, D), kept positive by softplus."""

    def __init__(self, sensitivity: float = 1.0, decay: float = 1.0, diffusion: float = 1e-2):
        super().__init__()
        self.raw = nn.Parameter(inv_softplus(torch.tensor([sensitivity, decay, diffusion], dtype=DTYPE)))

    @property
    def values(self) -> torch.Tensor:
        return softplus(self.raw)


def system_bands(system: FemSystem, dt: float, decay, diffusion):
    """Bands of (1 + dt*lam) M + dt*D K with Dirichlet rows set to identity."""
    ml, md, mu = system.mass
    kl, kd, ku = system.stiffness
    a = 1.0 + dt * decay
    b = dt * diffusion
    lower = a * ml + b * kl
    diag = a * md + b * kd
    upper = a * mu + b * ku
    one = torch.ones(1, dtype=DTYPE)
    zero = torch.zeros(1, dtype=DTYPE)
    diag = torch.cat([one, diag[1:-1], one])
    upper = torch.cat([zero, upper[1:]])
    lower = torch.cat([lower[:-1], zero])
    return lower, diag, upper


def _load(system: FemSystem, y_prev: torch.Tensor, u_next: torch.Tensor, dt: float, sensitivity) -> torch.Tensor:
    # y, u are (n,) or (n, B)
    rhs = tridiagonal_matvec(*system.mass, y_prev + dt * sensitivity * u_next)
    zero = torch.zeros_like(rhs[:1])
    return torch.cat([zero, rhs[1:-1], zero])


def step_implicit_euler(y_prev, u_next, dt: float, params, system: FemSystem) -> torch.Tensor:
    """One backward-Euler step; ``params`` is a (S, lam, D) triple or PDEParams.

    Nodal vectors are (n,) or batched (n, B). Boundary entries of the
    result are exactly zero.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    S, lam, D = params.values if isinstance(params, PDEParams) else params
    y_prev, u_next = as_tensor(y_prev), as_tensor(u_next)
    bands = system_bands(system, dt, lam, D)
    return solve_tridiagonal(*bands, _load(system, y_prev, u_next, dt, S))


def solve_pde(y0, force, dt: float, params, mesh: Mesh1D, system: FemSystem | None = None) -> FieldTrajectory:
    """March implicit Euler over all force time slices after the first.

    ``force`` is (..., T+1, n) nodal force values at t_0..t_T; ``y0`` is
    (..., n). Returns values (..., T+1, n).
    """
    system = assemble(mesh) if system is None else system
    S, lam, D = params.values if isinstance(params, PDEParams) else params
    force = as_tensor(force)
    y = as_tensor(y0)
    n = mesh.n_nodes
    if force.shape[-1] != n or y.shape[-1] != n:
        raise ValueError("force/initial condition do not match mesh vertices")
    batch = force.shape[:-2]
    T = force.shape[-2] - 1
    # batch goes to trailing columns for the banded solve
    fb = force.reshape(-1, T + 1, n).permute(1, 2, 0)  # (T+1, n, B)
    yb = torch.broadcast_to(y, batch + (n,)).reshape(-1, n).T
    bands = system_bands(system, dt, lam, D)
    out = [yb]
    for k in range(1, T + 1):
        yb = solve_tridiagonal(*bands, _load(system, yb, fb[k], dt, S))
        out.append(yb)
    vals = torch.stack(out).permute(2, 0, 1).reshape(batch + (T + 1, n))
    times = dt * np.arange(T + 1)
    return FieldTrajectory(times, vals, space=mesh.vertices, n_steps=T)


def discrete_laplacian_term(system: FemSystem, y: torch.Tensor) -> torch.Tensor:
    """Lumped-mass approximation of d2y/dx2 at interior nodes, -K y / rowsum(M).

    ``y`` is (..., n); boundary entries are returned as zero.
    """
    kl, kd, ku = system.stiffness
    ml, md, mu = system.mass
    lumped = md.clone()
    lumped[:-1] += mu
    lumped[1:] += ml
    yt = y.movedim(-1, 0)
    Ky = tridiagonal_matvec(kl, kd, ku, yt.reshape(yt.shape[0], -1)).reshape(yt.shape)
    lap = (-Ky / lumped.reshape((-1,) + (1,) * (yt.dim() - 1))).movedim(0, -1)
    lap = lap.clone()
    lap[..., 0] = 0.0
    lap[..., -1] = 0.0
    return lap
