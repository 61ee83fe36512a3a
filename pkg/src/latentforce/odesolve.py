"""Differentiable ODE integration driven by sampled latent-force paths.

Gradients are obtained by backpropagating through the solver steps
(discretise-then-differentiate). Step-size control in the adaptive solver
runs on detached values so the graph only contains the accepted updates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .interp import spline_coefficients
from .numcore import DTYPE, as_tensor


class NonFiniteState(FloatingPointError):
    pass


class StepSizeUnderflow(RuntimeError):
    pass


H_MIN = 1e-10


@dataclass
class FieldTrajectory:
    """Solution values on a grid.

    ODE: ``values`` is (..., N, P) over ``times``. PDE: (..., T, K) over
    ``times`` x ``space``.
    """

    times: np.ndarray
    values: torch.Tensor
    space: Optional[np.ndarray] = None
    n_steps: int = 0
    n_rejected: int = 0


@dataclass
class ODEProblem:
    """dy/dt = rhs(t, y, f(t)); y0 is (..., P); output on ``times``."""

    rhs: Callable[[float, torch.Tensor, torch.Tensor], torch.Tensor]
    y0: torch.Tensor
    times: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.ndim != 1 or (np.diff(self.times) <= 0).any():
            raise ValueError("output time grid must be strictly increasing")
        self.y0 = as_tensor(self.y0)


class ForcePath:
    """Continuous force t -> (..., L) through sampled values on a grid.

    ``values`` is (..., G, L) over ``times`` (G,). Queries that land on a grid
    time return the sample itself; anything else goes through a natural cubic
    spline that is differentiable in the samples.
    """

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=np.float64)
        self.values = as_tensor(values)
        if self.values.shape[-2] != self.times.shape[0]:
            raise ValueError("force samples do not match their time grid")
        self._tol = 1e-9 * float(np.diff(self.times).min()) if self.times.size > 1 else 0.0
        self._coef = None

    @classmethod
    def constant(cls, value, t0: float, t1: float) -> "ForcePath":
        v = as_tensor(value).reshape(-1)
        return cls([t0, t1], torch.stack([v, v]))

    def _coefficients(self):
        if self._coef is None:
            y = self.values.movedim(-2, 0)
            shape = y.shape[1:]
            coef = spline_coefficients(self.times, y.reshape(y.shape[0], -1))
            self._coef = (shape, coef)
        return self._coef

    def __call__(self, t: float) -> torch.Tensor:
        j = int(np.clip(np.searchsorted(self.times, t), 0, self.times.size - 1))
        for i in (j - 1, j):
            if 0 <= i < self.times.size and abs(t - self.times[i]) <= self._tol:
                return self.values[..., i, :]
        shape, (a, b, c, d) = self._coefficients()
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2))
        tau = float(np.clip(t, self.times[0], self.times[-1]) - self.times[k])
        out = a[k] + tau * (b[k] + tau * (c[k] + tau * d[k]))
        return out.reshape(shape)


def _check(y: torch.Tensor, t: float):
    if not bool(torch.isfinite(y).all()):
        raise NonFiniteState(f"state left finite range at t={t:g}")


def stage_times(times, h: float) -> np.ndarray:
    """All times an RK4 run with nominal step h evaluates the force at."""
    times = np.asarray(times, dtype=np.float64)
    out = [times[:1]]
    for t0, t1 in zip(times[:-1], times[1:]):
        n = max(1, int(math.ceil((t1 - t0) / h - 1e-9)))
        out.append(t0 + (t1 - t0) * np.arange(1, 2 * n + 1) / (2 * n))
    return np.concatenate(out)


def rk4_solve(problem: ODEProblem, force: Callable[[float], torch.Tensor], h: float) -> FieldTrajectory:
    """Classical RK4 with substeps of at most ``h`` inside each output interval."""
    if h <= 0:
        raise ValueError("step must be positive")
    times = problem.times
    y = problem.y0
    out = [y]
    steps = 0
    for t0, t1 in zip(times[:-1], times[1:]):
        n = max(1, int(math.ceil((t1 - t0) / h - 1e-9)))
        dt = (t1 - t0) / n
        for i in range(n):
            t = t0 + i * dt
            tm = t0 + (i + 0.5) * dt
            te = t0 + (i + 1) * dt
            fm = force(tm)
            k1 = problem.rhs(t, y, force(t))
            k2 = problem.rhs(tm, y + 0.5 * dt * k1, fm)
            k3 = problem.rhs(tm, y + 0.5 * dt * k2, fm)
            k4 = problem.rhs(te, y + dt * k3, force(te))
            y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            steps += 1
        _check(y, t1)
        out.append(y)
    return FieldTrajectory(times, torch.stack(out, dim=-2), n_steps=steps)


# Dormand-Prince 5(4) tableau
_C = [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0]
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0]
_B4 = [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
_E = [b5 - b4 for b5, b4 in zip(_B5, _B4)]


def _dopri_step(rhs, force, t, y, h, k1):
    ks = [k1]
    for s in range(1, 7):
        yi = y
        for a, k in zip(_A[s], ks):
            if a != 0.0:
                yi = yi + (h * a) * k
        ks.append(rhs(t + _C[s] * h, yi, force(t + _C[s] * h)))
    # FSAL: the 7th stage is evaluated at the 5th-order solution
    y_new = y
    for b, k in zip(_B5, ks):
        if b != 0.0:
            y_new = y_new + (h * b) * k
    with torch.no_grad():
        err = sum((h * e) * k for e, k in zip(_E, ks) if e != 0.0)
    return y_new, err, ks[6]


def adaptive_solve(problem: ODEProblem, force: Callable[[float], torch.Tensor],
                   rtol: float = 1e-6, atol: float = 1e-8, h0: Optional[float] = None,
                   safety: float = 0.9) -> FieldTrajectory:
    """Dormand-Prince 5(4) with a PI step controller.

    Steps are shortened to land exactly on each requested output time, so the
    returned values are genuine solver states rather than interpolants.
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    rhs = problem.rhs
    times = problem.times
    y = problem.y0
    t = float(times[0])
    span = float(times[-1] - times[0])
    k1 = rhs(t, y, force(t))
    if h0 is None:
        with torch.no_grad():
            scale = atol + rtol * y.abs()
            d0 = float(torch.sqrt(torch.mean((y / scale) ** 2)))
            d1 = float(torch.sqrt(torch.mean((k1 / scale) ** 2)))
        h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
        h = min(h, 0.1 * span)
    else:
        h = h0
    alpha, beta = 0.7 / 5, 0.4 / 5
    err_prev = 1e-4
    out = [y]
    steps = rejected = 0
    for t_out in times[1:]:
        t_out = float(t_out)
        while t < t_out:
            if h < H_MIN:
                raise StepSizeUnderflow(f"step {h:.3g} below {H_MIN:g} at t={t:g}")
            hit = t + h >= t_out - 1e-12 * max(1.0, abs(t_out))
            h_try = t_out - t if hit else h
            y_new, err, k_last = _dopri_step(rhs, force, t, y, h_try, k1)
            with torch.no_grad():
                scale = atol + rtol * torch.maximum(y.abs(), y_new.abs())
                en = float(torch.sqrt(torch.mean((err / scale) ** 2)))
            if not math.isfinite(en):
                h *= 0.2
                rejected += 1
                continue
            if en <= 1.0:
                t = t_out if hit else t + h_try
                y, k1 = y_new, k_last
                steps += 1
                en = max(en, 1e-10)
                fac = safety * en ** (-alpha) * err_prev ** beta
                err_prev = en
                if not hit or h_try >= h:
                    h = h_try * min(5.0, max(0.2, fac))
                _check(y, t)
            else:
                rejected += 1
                h = h_try * max(0.2, safety * en ** (-1 / 5))
        out.append(y)
    return FieldTrajectory(times, torch.stack(out, dim=-2), n_steps=steps, n_rejected=rejected)
