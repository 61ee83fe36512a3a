"""Synthetic instances with known latent forces and parameters.

Every instance is a pure function of (seed, index): the generator for index
i is seeded from ``SeedSequence([seed, i])``, so a dataset prefix does not
depend on how many instances follow it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .fem1d import Mesh1D, solve_pde
from .numcore import DTYPE
from .odesolve import ForcePath, ODEProblem, rk4_solve, stage_times

FAMILIES = ("transcription", "lotka", "reaction_diffusion")


@dataclass
class Instance:
    """One generated system.

    ``times``/``Y`` are the noisy observations (ODE: (N, P); PDE: (T, X)
    over ``space``). ``force`` is the truth on the same grid; ``dense_*``
    hold the truth on the finer grid used to produce it.
    """

    family: str
    times: np.ndarray
    Y: np.ndarray
    Y_clean: np.ndarray
    force: np.ndarray
    params: dict
    space: Optional[np.ndarray] = None
    dense_times: Optional[np.ndarray] = None
    dense_force: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)


def instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def rbf_matrix(a: np.ndarray, b: np.ndarray, lengthscale: float, variance: float = 1.0) -> np.ndarray:
    return variance * np.exp(-0.5 * ((a[:, None] - b[None, :]) / lengthscale) ** 2)


def gp_draw(x: np.ndarray, lengthscale: float, variance: float, rng: np.random.Generator, size=()) -> np.ndarray:
    K = rbf_matrix(x, x, lengthscale, variance)
    L = np.linalg.cholesky(K + 1e-8 * variance * x.size * np.eye(x.size))
    z = rng.standard_normal(tuple(np.atleast_1d(size)) + (x.size,)) if size != () else rng.standard_normal(x.size)
    return z @ L.T


def _uniform(rng, prior, size=None):
    lo, hi = prior
    return rng.uniform(lo, hi, size=size)


def transcription_instance(seed: int, index: int, n_times: int = 7, t_end: float = 12.0, n_genes: int = 5,
                           lengthscale: float = 3.0, variance: float = 1.0, noise: float = 0.05,
                           prior=(0.0, 1.0), fixed_sensitivity: Optional[float] = 1.0,
                           fixed_basal: Optional[float] = 0.5, fixed_decay: Optional[float] = 0.5,
                           fine_factor: int = 4) -> Instance:
    """Linear transcription network driven by one zero-mean RBF GP draw."""
    rng = instance_rng(seed, index)
    times = np.linspace(0.0, t_end, n_times)
    h = (times[1] - times[0]) / fine_factor
    grid = stage_times(times, h)
    f = gp_draw(grid, lengthscale, variance, rng)
    b, s, d = (_uniform(rng, prior, n_genes) for _ in range(3))
    if fixed_sensitivity is not None:
        s[0] = fixed_sensitivity
    if fixed_basal is not None:
        b[0] = fixed_basal
    if fixed_decay is not None:
        d[0] = fixed_decay
    bt, st, dt_ = (torch.tensor(v, dtype=DTYPE) for v in (b, s, d))
    problem = ODEProblem(lambda t, y, ff: bt + st * ff - dt_ * y, torch.zeros(n_genes, dtype=DTYPE), times)
    with torch.no_grad():
        Yc = rk4_solve(problem, ForcePath(grid, torch.tensor(f[:, None])), h).values.numpy()
    Y = Yc + noise * rng.standard_normal(Yc.shape)
    idx = np.searchsorted(grid, times - 1e-12)
    return Instance("transcription", times, Y, Yc, f[idx][:, None],
                    {"basal": b, "sensitivity": s, "decay": d},
                    dense_times=grid, dense_force=f[:, None])


def lotka_solve(u0: float, v0: float, delta: float, gamma: float, times: np.ndarray,
                alpha: float = 1.0, beta: float = 1.0, h: float = 0.01) -> np.ndarray:
    """Full two-species predator-prey solve; returns (N, 2) columns (prey, predator)."""
    def rhs(t, y, f):
        u, v = y[..., 0], y[..., 1]
        return torch.stack([alpha * u - beta * u * v, delta * u * v - gamma * v], -1)

    problem = ODEProblem(rhs, torch.tensor([u0, v0], dtype=DTYPE), times)
    with torch.no_grad():
        traj = rk4_solve(problem, ForcePath.constant([0.0], times[0], times[-1]), h)
    return traj.values.numpy()


def lotka_instance(seed: int, index: int, n_times: int = 41, t_train: float = 20.0, t_end: float = 30.0,
                   noise: float = 0.05, growth_prior=(0.5, 1.0), decay_prior=(0.5, 1.0),
                   dense_factor: int = 8) -> Instance:
    """Predator observations on [0, t_train]; prey is the latent force.

    ``extra['test_times']``/``extra['test_Y']`` hold the extrapolation window
    (t_train, t_end] at the same spacing.
    """
    rng = instance_rng(seed, index)
    delta = float(_uniform(rng, growth_prior))
    gamma = float(_uniform(rng, decay_prior))
    u_eq = gamma / delta
    u0 = u_eq * float(rng.uniform(1.5, 2.5))
    v0 = float(rng.uniform(0.4, 0.8))
    dt = t_train / (n_times - 1)
    all_times = np.arange(0.0, t_end + 0.5 * dt, dt)
    dense = np.linspace(0.0, all_times[-1], (all_times.size - 1) * dense_factor + 1)
    sol = lotka_solve(u0, v0, delta, gamma, dense)
    idx = np.searchsorted(dense, all_times - 1e-9)
    clean = sol[idx]
    obs = clean[:, 1:] + noise * rng.standard_normal((all_times.size, 1))
    train = all_times <= t_train + 1e-9
    return Instance("lotka", all_times[train], obs[train], clean[train, 1:], clean[train, :1],
                    {"growth": delta, "decay": gamma, "alpha": 1.0, "beta": 1.0},
                    dense_times=dense, dense_force=sol[:, :1],
                    extra={"test_times": all_times[~train], "test_Y": obs[~train],
                           "test_Y_clean": clean[~train, 1:], "test_force": clean[~train, :1],
                           "u0": u0, "v0": v0})


def reaction_diffusion_instance(seed: int, index: int, n_times: int = 11, t_end: float = 1.0,
                                n_elements: int = 20, length: float = 1.0, lengthscales=(0.3, 0.2),
                                variance: float = 1.0, noise: float = 0.05,
                                sensitivity_prior=(0.5, 1.5), decay_prior=(0.1, 1.0),
                                diffusion_prior=(0.005, 0.05), time_refine: int = 8,
                                space_refine: int = 2) -> Instance:
    """Zero-mean anisotropic GP forcing pushed through a refined FEM solve."""
    rng = instance_rng(seed, index)
    times = np.linspace(0.0, t_end, n_times)
    space = np.linspace(0.0, length, n_elements + 1)
    fine_t = np.linspace(0.0, t_end, (n_times - 1) * time_refine + 1)
    mesh = Mesh1D.uniform(n_elements * space_refine, length)
    # separable kernel: K = Kt (x) Kx, so a draw is Lt Z Lx^T
    Lt = np.linalg.cholesky(rbf_matrix(fine_t, fine_t, lengthscales[0]) + 1e-8 * fine_t.size * np.eye(fine_t.size))
    xv = mesh.vertices
    Lx = np.linalg.cholesky(rbf_matrix(xv, xv, lengthscales[1]) + 1e-8 * xv.size * np.eye(xv.size))
    u = np.sqrt(variance) * Lt @ rng.standard_normal((fine_t.size, xv.size)) @ Lx.T
    S = float(_uniform(rng, sensitivity_prior))
    lam = float(_uniform(rng, decay_prior))
    D = float(_uniform(rng, diffusion_prior))
    with torch.no_grad():
        sol = solve_pde(torch.zeros(xv.size, dtype=DTYPE), torch.tensor(u), fine_t[1] - fine_t[0],
                        (S, lam, D), mesh).values.numpy()
    ti = np.arange(n_times) * time_refine
    xi = np.arange(space.size) * space_refine
    clean = sol[ti][:, xi]
    Y = clean + noise * rng.standard_normal(clean.shape)
    Y[:, 0] = Y[:, -1] = 0.0
    return Instance("reaction_diffusion", times, Y, clean, u[ti][:, xi],
                    {"sensitivity": S, "decay": lam, "diffusion": D}, space=space,
                    dense_times=fine_t, dense_force=u[:, xi])


def make_instance(family: str, seed: int, index: int, **kw) -> Instance:
    if family == "transcription":
        return transcription_instance(seed, index, **kw)
    if family == "lotka":
        return lotka_instance(seed, index, **kw)
    if family == "reaction_diffusion":
        return reaction_diffusion_instance(seed, index, **kw)
    raise ValueError(f"unknown model family {family!r}")
