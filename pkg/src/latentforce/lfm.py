"""Variational latent force models and their two-phase training loop.

A model couples a sparse variational GP over the latent forces with a
differential equation. Training first matches the equation's right-hand
side against spline derivatives of the data (no solver calls), then
fine-tunes the same ELBO with the likelihood evaluated on the solver output.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .fem1d import FemSystem, Mesh1D, PDEParams, assemble, discrete_laplacian_term, solve_pde
from .interp import fit_natural_cubic
from .kernels import Kernel
from .numcore import DEFAULT_JITTER, DTYPE, as_tensor, inv_softplus, softplus
from .odesolve import ForcePath, ODEProblem, adaptive_solve, rk4_solve, stage_times
from .svgp import VariationalDist, gaussian_loglik, inducing_grid, kl_to_prior, sample_forces

log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-4


class DomainError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


# -- responses ---------------------------------------------------------------

@dataclass
class ResponseFn:
    """Map from latent forces (..., L) to per-output drive (..., P) or (..., 1).

    ``identity`` and ``softplus`` act on the unweighted sum of forces; ``hill``
    uses per-output weights (P, L) and offsets (P,).
    """

    kind: str = "identity"
    weights: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("identity", "softplus", "hill"):
            raise ValueError(f"unknown response {self.kind!r}")
        if self.kind == "hill":
            if self.weights is None:
                raise ValueError("hill response needs weights")
            self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
            self.offsets = np.zeros(self.weights.shape[0]) if self.offsets is None else np.atleast_1d(
                np.asarray(self.offsets, dtype=np.float64))

    def __call__(self, f: torch.Tensor) -> torch.Tensor:
        if self.kind == "identity":
            return f.sum(-1, keepdim=True)
        if self.kind == "softplus":
            return softplus(f.sum(-1, keepdim=True))
        if bool((f <= 0).any()):
            raise DomainError("hill response needs positive forces")
        w = torch.tensor(self.weights, dtype=DTYPE)
        w0 = torch.tensor(self.offsets, dtype=DTYPE)
        # prod_i f_i^w / (prod_i f_i^w + e^-w0), evaluated in log space
        logp = torch.log(f) @ w.T
        return torch.sigmoid(logp + w0)


def response(f, fn: ResponseFn, j: int = 0) -> torch.Tensor:
    f = as_tensor(f).reshape(-1)
    out = fn(f)
    return out[j] if out.shape[-1] > 1 else out[0]


# -- data containers ---------------------------------------------------------

@dataclass
class ODEData:
    times: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]


@dataclass
class PDEData:
    times: np.ndarray
    space: np.ndarray
    Y: np.ndarray  # (T, X)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.space = np.asarray(self.space, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)


@dataclass
class TrainConfig:
    preestimation_epochs: int = 100
    finetune_epochs: int = 600
    mc_samples: int = 5
    lr_pre: float = 0.05
    lr_fine: float = 0.01
    seed: int = 0
    noise_init: float = 0.01
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if self.preestimation_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.mc_samples < 1:
            raise ValueError("need at least one MC sample")


# -- models ------------------------------------------------------------------

class LatentForceModel(nn.Module):
    """Shared variational machinery: kernel, inducing inputs, q(u), noise."""

    family = "base"

    def __init__(self, kernel: Kernel, Z, num_forces: int, num_outputs: int, response: ResponseFn,
                 noise_init: float = 0.1, jitter: float = DEFAULT_JITTER):
        super().__init__()
        self.kernel = kernel
        self.register_buffer("Z", as_tensor(Z))
        self.num_forces = num_forces
        self.num_outputs = num_outputs
        self.response = response
        self.jitter = jitter
        self.vdist = VariationalDist(num_forces, self.Z.shape[0])
        raw = inv_softplus(torch.tensor(noise_init - NOISE_FLOOR, dtype=DTYPE))
        self.raw_noise = nn.Parameter(raw.repeat(num_outputs))
        self.raw_grad_noise = nn.Parameter(raw.repeat(num_outputs))

    @property
    def noise(self) -> torch.Tensor:
        return softplus(self.raw_noise) + NOISE_FLOOR

    @property
    def grad_noise(self) -> torch.Tensor:
        return softplus(self.raw_grad_noise) + NOISE_FLOOR

    def kl(self) -> torch.Tensor:
        return kl_to_prior(self.vdist, self.Z, self.kernel, self.jitter)

    def sample(self, X, eps) -> torch.Tensor:
        return sample_forces(self.vdist, self.Z, X, self.kernel, eps, self.jitter)

    def forward(self, _elbo):
        data, eps, phase, target = _elbo
        return self.expected_loglik(data, as_tensor(eps), phase, target) - self.kl()

    def trainable_named(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def equation_params(self) -> dict:
        raise NotImplementedError


class OrdinaryLFM(LatentForceModel):
    """ODE latent force model on a 1D time input.

    Subclasses supply ``rhs(t, y, g)`` with g = G(f). Forces for the fixed
    step solver are sampled exactly at every RK4 stage time; the adaptive
    solver gets a spline through a draw on a grid 4x finer than the data.
    """

    def __init__(self, times, num_outputs: int, kernel: Kernel, response: ResponseFn,
                 num_forces: int = 1, num_inducing: int = 16, y0=None, solver: str = "rk4",
                 step_fraction: int = 4, rtol: float = 1e-5, atol: float = 1e-7, **kw):
        times = np.asarray(times, dtype=np.float64)
        Z = inducing_grid(times.min(), times.max(), num_inducing)
        super().__init__(kernel, Z, num_forces, num_outputs, response, **kw)
        self.t0 = float(times[0])
        self.spacing = float(np.diff(times).min())
        self.solver = solver
        self.step = self.spacing / step_fraction
        self.rtol, self.atol = rtol, atol
        y0 = torch.zeros(num_outputs, dtype=DTYPE) if y0 is None else as_tensor(y0).reshape(-1)
        self.y0 = nn.Parameter(y0.clone())

    def rhs(self, t, y, g):
        raise NotImplementedError

    def force_grid(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=np.float64)
        if self.solver == "rk4":
            return stage_times(times, self.step)
        n = 4 * (times.size - 1) + 1
        return np.linspace(times[0], times[-1], n)

    def solve(self, times, F: torch.Tensor, grid=None) -> torch.Tensor:
        """Outputs (S, N, P) for forces F (S, G, L) on ``grid`` (default force_grid)."""
        times = np.asarray(times, dtype=np.float64)
        if times[0] != self.t0:
            times_full = np.concatenate([[self.t0], times])
        else:
            times_full = times
        grid = self.force_grid(times_full) if grid is None else grid
        path = ForcePath(grid, F)
        y0 = self.y0.expand(F.shape[:-2] + (self.num_outputs,))
        problem = ODEProblem(lambda t, y, f: self.rhs(t, y, self.response(f)), y0, times_full)
        if self.solver == "rk4":
            traj = rk4_solve(problem, path, self.step)
        else:
            traj = adaptive_solve(problem, path, self.rtol, self.atol)
        vals = traj.values
        return vals if times_full is times else vals[..., 1:, :]

    def eps_shape(self, data: ODEData, phase: str, S: int):
        n = data.times.size if phase == "pre" else self.force_grid(data.times).size
        return (S, n, self.num_forces)

    def expected_loglik(self, data: ODEData, eps, phase: str, target=None) -> torch.Tensor:
        S = eps.shape[0]
        Y = torch.tensor(data.Y, dtype=DTYPE)
        if phase == "pre":
            F = self.sample(data.times, eps)
            pred = self.rhs(data.times, Y, self.response(F))
            return gaussian_loglik(torch.as_tensor(target), pred, self.grad_noise) / S
        grid = self.force_grid(data.times)
        F = self.sample(grid, eps)
        out = self.solve(data.times, F, grid)
        return gaussian_loglik(Y, out, self.noise) / S

    def predict(self, times, n_samples: int = 50, seed: int = 0):
        """Output and G(force) samples at ``times``: (S, N, P), (S, N, ·)."""
        times = np.asarray(times, dtype=np.float64)
        full = times if times[0] == self.t0 else np.concatenate([[self.t0], times])
        grid = self.force_grid(full)
        g = torch.Generator().manual_seed(seed)
        eps = torch.randn((n_samples, grid.size, self.num_forces), generator=g, dtype=DTYPE)
        with torch.no_grad():
            F = self.sample(grid, eps)
            out = self.solve(times, F, grid)
            idx = np.searchsorted(grid, times - 1e-9 * self.spacing)
            G = self.response(F[:, idx, :])
        return out, G, F[:, idx, :]


class TranscriptionLFM(OrdinaryLFM):
    """dy_j/dt = b_j + s_j G(f) - d_j y_j.

    ``frozen`` maps any of "basal", "sensitivity", "decay" to a fixed value
    for gene ``frozen_gene``; a value of None freezes the parameter at its
    initialisation. The sensitivity anchors the force scale; with a basal
    term the force offset also needs an anchor.
    """

    family = "transcription"
    kinds = ("basal", "sensitivity", "decay")

    def __init__(self, times, num_outputs: int, kernel: Kernel, response: ResponseFn | None = None,
                 frozen_gene: Optional[int] = 0, frozen: Optional[dict] = None, init_params=None,
                 rng: Optional[np.random.Generator] = None, **kw):
        super().__init__(times, num_outputs, kernel, response or ResponseFn("identity"), **kw)
        rng = np.random.default_rng(0) if rng is None else rng
        if init_params is None:
            init_params = rng.uniform(0.0, 1.0, size=(3, num_outputs))
        init = dict(zip(self.kinds, (np.maximum(np.asarray(v, float), 1e-3) for v in init_params)))
        frozen = {"sensitivity": None} if frozen is None else frozen
        for kind in self.kinds:
            setattr(self, "raw_" + kind, nn.Parameter(inv_softplus(torch.tensor(init[kind], dtype=DTYPE))))
            mask = torch.zeros(num_outputs, dtype=torch.bool)
            fixed = torch.zeros(num_outputs, dtype=DTYPE)
            if frozen_gene is not None and kind in frozen:
                mask[frozen_gene] = True
                v = frozen[kind]
                fixed[frozen_gene] = float(init[kind][frozen_gene] if v is None else v)
            self.register_buffer(f"{kind}_mask", mask)
            self.register_buffer(f"{kind}_fixed", fixed)

    def _value(self, kind):
        return torch.where(getattr(self, kind + "_mask"), getattr(self, kind + "_fixed"),
                           softplus(getattr(self, "raw_" + kind)))

    @property
    def basal(self):
        return self._value("basal")

    @property
    def sensitivity(self):
        return self._value("sensitivity")

    @property
    def decay(self):
        return self._value("decay")

    def free_mask(self) -> np.ndarray:
        """Boolean mask over the flattened (basal, sensitivity, decay) vector."""
        return ~torch.cat([getattr(self, k + "_mask") for k in self.kinds]).numpy()

    def rhs(self, t, y, g):
        return self.basal + self.sensitivity * g - self.decay * y

    def equation_params(self) -> dict:
        return {"basal": self.basal.detach().numpy().copy(),
                "sensitivity": self.sensitivity.detach().numpy().copy(),
                "decay": self.decay.detach().numpy().copy()}


def transcription_rhs(t, y, f, params, response_fn: ResponseFn):
    """Elementwise b + s*G(f) - d*y for a (b, s, d) parameter triple."""
    b, s, d = (as_tensor(p) for p in params)
    return b + s * response_fn(as_tensor(f).reshape(-1)) - d * as_tensor(y)


def lotka_rhs(t, v, f, params, response_fn: ResponseFn):
    """Predator equation with prey replaced by G(f): delta*G(f)*v - gamma*v."""
    delta, gamma = (as_tensor(p) for p in params)
    g = response_fn(as_tensor(f).reshape(-1))[0]
    return delta * g * as_tensor(v) - gamma * as_tensor(v)


class LotkaVolterraLFM(OrdinaryLFM):
    """Predator dynamics driven by a latent prey population."""

    family = "lotka"

    def __init__(self, times, kernel: Kernel, response: ResponseFn | None = None, init_params=None,
                 rng: Optional[np.random.Generator] = None, **kw):
        super().__init__(times, 1, kernel, response or ResponseFn("softplus"), **kw)
        rng = np.random.default_rng(0) if rng is None else rng
        if init_params is None:
            init_params = rng.uniform(0.0, 1.0, size=2)
        delta, gamma = np.maximum(np.asarray(init_params, float), 1e-3)
        self.raw_growth = nn.Parameter(inv_softplus(torch.tensor(delta, dtype=DTYPE)))
        self.raw_decay = nn.Parameter(inv_softplus(torch.tensor(gamma, dtype=DTYPE)))

    @property
    def growth(self):
        return softplus(self.raw_growth)

    @property
    def decay(self):
        return softplus(self.raw_decay)

    def rhs(self, t, v, g):
        return self.growth * g * v - self.decay * v

    def equation_params(self) -> dict:
        return {"growth": float(self.growth.detach()), "decay": float(self.decay.detach())}


class ReactionDiffusionLFM(LatentForceModel):
    """dy/dt = S u - lam y + D y_xx on [0, l], zero Dirichlet ends.

    The latent force u(t, x) has an anisotropic RBF prior over (t, x). The
    FEM mesh contains every data location; the time step divides the data
    spacing ``substeps`` times.
    """

    family = "reaction_diffusion"

    def __init__(self, data: PDEData, kernel: Kernel, response: ResponseFn | None = None,
                 n_elements: int = 20, substeps: int = 4, inducing=(12, 12), init_params=None,
                 rng: Optional[np.random.Generator] = None, **kw):
        times, space = data.times, data.space
        Z = inducing_grid([times.min(), space.min()], [times.max(), space.max()], inducing)
        super().__init__(kernel, Z, 1, 1, response or ResponseFn("identity"), **kw)
        self.mesh = Mesh1D.including(space, n_elements)
        self.system = assemble(self.mesh)
        self.substeps = substeps
        dts = np.diff(times)
        if not np.allclose(dts, dts[0]):
            raise ValueError("PDE data times must be uniformly spaced")
        self.dt = float(dts[0]) / substeps
        self.t_grid = times[0] + self.dt * np.arange(substeps * (times.size - 1) + 1)
        self.data_time_idx = np.arange(times.size) * substeps
        self.data_node_idx = np.array([int(np.argmin(np.abs(self.mesh.vertices - x))) for x in space])
        rng = np.random.default_rng(0) if rng is None else rng
        if init_params is None:
            init_params = rng.uniform(0.0, 1.0, size=3)
        self.pde = PDEParams(*np.maximum(np.asarray(init_params, float), 1e-3))
        y0 = np.zeros(self.mesh.n_nodes)
        y0[self.data_node_idx] = data.Y[0]
        y0[0] = y0[-1] = 0.0
        self.register_buffer("y0", torch.tensor(y0, dtype=DTYPE))

    def lattice(self, times, nodes) -> torch.Tensor:
        tt, xx = np.meshgrid(times, nodes, indexing="ij")
        return torch.tensor(np.stack([tt.ravel(), xx.ravel()], 1), dtype=DTYPE)

    def eps_shape(self, data: PDEData, phase: str, S: int):
        if phase == "pre":
            return (S, data.times.size * data.space.size, 1)
        return (S, self.t_grid.size * self.mesh.n_nodes, 1)

    def solve(self, F: torch.Tensor) -> torch.Tensor:
        """Fields (S, T+1, n) for nodal forces F (S, T+1, n)."""
        return solve_pde(self.y0, F, self.dt, self.pde, self.mesh, self.system).values

    def expected_loglik(self, data: PDEData, eps, phase: str, target=None) -> torch.Tensor:
        S = eps.shape[0]
        Y = torch.tensor(data.Y, dtype=DTYPE)
        if phase == "pre":
            F = self.sample(self.lattice(data.times, data.space), eps)
            g = self.response(F).reshape(S, data.times.size, data.space.size)
            Sv, lam, D = self.pde.values
            lap = self._data_laplacian(data)
            pred = Sv * g - lam * Y + D * lap
            interior = torch.tensor((self.data_node_idx > 0) & (self.data_node_idx < self.mesh.n_nodes - 1))
            return gaussian_loglik(torch.as_tensor(target)[:, interior], pred[..., interior], self.grad_noise) / S
        F = self.sample(self.lattice(self.t_grid, self.mesh.vertices), eps)
        g = self.response(F).reshape(S, self.t_grid.size, self.mesh.n_nodes)
        field_ = self.solve(g)
        out = field_[:, self.data_time_idx][:, :, self.data_node_idx]
        return gaussian_loglik(Y, out, self.noise) / S

    def _data_laplacian(self, data: PDEData) -> torch.Tensor:
        if not hasattr(self, "_lap_cache"):
            nodes = self.mesh.vertices
            if data.space.size == nodes.size:
                on_mesh = data.Y
            else:
                on_mesh = fit_natural_cubic(data.space, data.Y.T)(nodes).T
            on_mesh = on_mesh.copy()
            on_mesh[:, 0] = on_mesh[:, -1] = 0.0
            lap = discrete_laplacian_term(self.system, torch.tensor(on_mesh, dtype=DTYPE))
            self._lap_cache = lap[:, self.data_node_idx]
        return self._lap_cache

    def predict(self, n_samples: int = 50, seed: int = 0):
        """(fields (S, T+1, n), G(u) (S, T+1, n)) on the model time grid and mesh."""
        g = torch.Generator().manual_seed(seed)
        X = self.lattice(self.t_grid, self.mesh.vertices)
        eps = torch.randn((n_samples, X.shape[0], 1), generator=g, dtype=DTYPE)
        with torch.no_grad():
            F = self.sample(X, eps)
            G = self.response(F).reshape(n_samples, self.t_grid.size, self.mesh.n_nodes)
            return self.solve(G), G

    def equation_params(self) -> dict:
        S, lam, D = self.pde.values.detach().numpy()
        return {"sensitivity": float(S), "decay": float(lam), "diffusion": float(D)}


# -- objective and training --------------------------------------------------

def derivative_targets(data, model) -> np.ndarray:
    """Spline estimate of dy/dt at the data times, one spline per series."""
    if data.times.size < 3:
        raise ValueError("gradient matching needs at least 3 time points")
    return fit_natural_cubic(data.times, data.Y).derivative(data.times)


def elbo(data, model: LatentForceModel, eps, phase: str = "fine", target=None) -> torch.Tensor:
    """Monte Carlo ELBO: mean log-likelihood over draws minus KL(q(u) || p(u))."""
    if phase == "pre" and target is None:
        target = derivative_targets(data, model)
    return model.expected_loglik(data, as_tensor(eps), phase, target) - model.kl()


@dataclass
class TrainResult:
    model: LatentForceModel
    trace: list = field(default_factory=list)  # (epoch, phase, elbo)
    seconds: list = field(default_factory=list)  # (phase, epoch, wall seconds)


def _run_phase(data, model, config: TrainConfig, phase: str, epochs: int, lr: float, trace: list,
               gen: torch.Generator, target=None, clock: Optional[list] = None):
    if epochs == 0:
        return
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    shape = model.eps_shape(data, phase, config.mc_samples)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        eps = torch.randn(shape, generator=gen, dtype=DTYPE)
        opt.zero_grad()
        value = elbo(data, model, eps, phase, target)
        if not bool(torch.isfinite(value)):
            raise NonFiniteLoss(f"non-finite ELBO in {phase} epoch {epoch}", trace)
        (-value).backward()
        opt.step()
        trace.append((len(trace), phase, float(value.detach())))
        if clock is not None:
            clock.append((phase, epoch, time.perf_counter() - t0))


def pretrain_gradient_match(data, model: LatentForceModel, config: TrainConfig, trace=None,
                            gen: Optional[torch.Generator] = None, clock=None) -> LatentForceModel:
    """Fit q(u), kernel and equation parameters by matching rhs to spline derivatives."""
    trace = [] if trace is None else trace
    gen = torch.Generator().manual_seed(config.seed) if gen is None else gen
    if config.preestimation_epochs == 0:
        return model
    target = derivative_targets(data, model)
    _run_phase(data, model, config, "pre", config.preestimation_epochs, config.lr_pre, trace, gen, target, clock)
    return model


def train(data, model: LatentForceModel, config: TrainConfig) -> TrainResult:
    """Gradient-matching pre-estimation followed by solver fine-tuning."""
    trace: list = []
    clock: list = []
    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    pretrain_gradient_match(data, model, config, trace, gen, clock)
    _run_phase(data, model, config, "fine", config.finetune_epochs, config.lr_fine, trace, gen, clock=clock)
    return TrainResult(model, trace, clock)


def elbo_as_function(data, model: LatentForceModel, eps, phase: str = "fine", target=None):
    """(f, x0): the ELBO as a function of the flattened trainable parameters.

    Used by gradient checks; ``f`` writes a vector into the parameters
    functionally, so autograd sees the dependence on its argument.
    """
    named = model.trainable_named()
    shapes = [p.shape for _, p in named]
    sizes = [p.numel() for _, p in named]
    x0 = torch.cat([p.detach().reshape(-1) for _, p in named])
    if phase == "pre" and target is None:
        target = derivative_targets(data, model)

    def f(x):
        chunks = torch.split(x, sizes)
        new = {n: c.reshape(s) for (n, _), c, s in zip(named, chunks, shapes)}
        return torch.func.functional_call(model, new, args=(), kwargs={"_elbo": (data, eps, phase, target)})

    return f, x0
