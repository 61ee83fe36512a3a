"""Latent force operator: a Fourier neural operator from solutions to forces.

The network lifts solution channels (plus a normalised coordinate) to a
hidden width, applies four Fourier layers, a small boundary convolution and
a pointwise head that emits a Gaussian mean and variance per latent force.
ODE instances are 1D grids over time; PDE instances are 2D (time x space).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numcore import DTYPE

log = logging.getLogger(__name__)


class GridTooSmall(ValueError):
    pass


class ChannelMismatch(ValueError):
    pass


def spectral_conv(x: torch.Tensor, w_real: torch.Tensor, w_imag: torch.Tensor, k_max: int) -> torch.Tensor:
    """Mix the lowest ``k_max`` Fourier modes channel-wise.

    ``x`` is (B, C_in, N); weights are (C_in, C_out, k_max). Modes above
    ``k_max`` are dropped.
    """
    n = x.shape[-1]
    if n < 2 * k_max:
        raise GridTooSmall(f"grid {n} < 2 * {k_max} modes")
    x_ft = torch.fft.rfft(x, dim=-1)
    w = torch.complex(w_real, w_imag)
    out_ft = torch.zeros(x.shape[0], w.shape[1], n // 2 + 1, dtype=x_ft.dtype)
    out_ft[..., :k_max] = torch.einsum("bix,iox->box", x_ft[..., :k_max], w)
    return torch.fft.irfft(out_ft, n=n, dim=-1)


def spectral_conv2d(x: torch.Tensor, weights, modes: tuple) -> torch.Tensor:
    """2D variant; ``weights`` holds (real, imag) pairs for the low positive and
    negative first-axis frequencies, each (C_in, C_out, m1, m2)."""
    m1, m2 = modes
    n1, n2 = x.shape[-2:]
    if n1 < 2 * m1 or n2 < 2 * m2:
        raise GridTooSmall(f"grid {n1}x{n2} too small for {m1}x{m2} modes")
    x_ft = torch.fft.rfft2(x)
    (r1, i1), (r2, i2) = weights
    out_ft = torch.zeros(x.shape[0], r1.shape[1], n1, n2 // 2 + 1, dtype=x_ft.dtype)
    out_ft[..., :m1, :m2] = torch.einsum("bixy,ioxy->boxy", x_ft[..., :m1, :m2], torch.complex(r1, i1))
    out_ft[..., -m1:, :m2] = torch.einsum("bixy,ioxy->boxy", x_ft[..., -m1:, :m2], torch.complex(r2, i2))
    return torch.fft.irfft2(out_ft, s=(n1, n2))


class FourierLayer(nn.Module):
    def __init__(self, width: int, modes, ndim: int = 1):
        super().__init__()
        self.ndim = ndim
        self.modes = tuple(np.atleast_1d(modes).tolist()) if ndim == 2 else int(modes)
        scale = 1.0 / (width * width)
        if ndim == 1:
            shape = (width, width, self.modes)
            self.w_real = nn.Parameter(scale * torch.rand(shape, dtype=DTYPE))
            self.w_imag = nn.Parameter(scale * torch.rand(shape, dtype=DTYPE))
            self.local = nn.Conv1d(width, width, 1, dtype=DTYPE)
        else:
            shape = (width, width) + self.modes
            self.w_real = nn.Parameter(scale * torch.rand(shape, dtype=DTYPE))
            self.w_imag = nn.Parameter(scale * torch.rand(shape, dtype=DTYPE))
            self.w2_real = nn.Parameter(scale * torch.rand(shape, dtype=DTYPE))
            self.w2_imag = nn.Parameter(scale * torch.rand(shape, dtype=DTYPE))
            self.local = nn.Conv2d(width, width, 1, dtype=DTYPE)

    def forward(self, x):
        if self.ndim == 1:
            spec = spectral_conv(x, self.w_real, self.w_imag, self.modes)
        else:
            spec = spectral_conv2d(x, ((self.w_real, self.w_imag), (self.w2_real, self.w2_imag)), self.modes)
        return spec + self.local(x)


@dataclass
class LFOConfig:
    in_channels: int
    out_channels: int = 1
    width: int = 32
    modes: object = 16
    ndim: int = 1
    n_params: int = 0
    n_layers: int = 4


class LFONet(nn.Module):
    def __init__(self, config: LFOConfig):
        super().__init__()
        self.config = config
        c = config
        conv = nn.Conv1d if c.ndim == 1 else nn.Conv2d
        self.lift = conv(c.in_channels + c.ndim, c.width, 1, dtype=DTYPE)
        self.layers = nn.ModuleList([FourierLayer(c.width, c.modes, c.ndim) for _ in range(c.n_layers)])
        self.boundary = conv(c.width, c.width, 3, padding=1, padding_mode="replicate", dtype=DTYPE)
        self.proj1 = conv(c.width, 64, 1, dtype=DTYPE)
        self.proj2 = conv(64, 2 * c.out_channels, 1, dtype=DTYPE)
        self.param_head = nn.Linear(c.width, c.n_params, dtype=DTYPE) if c.n_params else None
        self.register_buffer("in_mean", torch.zeros(c.in_channels, dtype=DTYPE))
        self.register_buffer("in_std", torch.ones(c.in_channels, dtype=DTYPE))
        self.register_buffer("out_mean", torch.zeros(c.out_channels, dtype=DTYPE))
        self.register_buffer("out_std", torch.ones(c.out_channels, dtype=DTYPE))
        self.register_buffer("param_mean", torch.zeros(c.n_params, dtype=DTYPE))
        self.register_buffer("param_std", torch.ones(c.n_params, dtype=DTYPE))

    def _coords(self, x):
        shape = x.shape
        if self.config.ndim == 1:
            g = torch.linspace(0, 1, shape[-1], dtype=DTYPE)
            return g.expand(shape[0], 1, shape[-1])
        gt = torch.linspace(0, 1, shape[-2], dtype=DTYPE)
        gx = torch.linspace(0, 1, shape[-1], dtype=DTYPE)
        tt, xx = torch.meshgrid(gt, gx, indexing="ij")
        return torch.stack([tt, xx]).expand(shape[0], 2, shape[-2], shape[-1])

    def _bshape(self, v):
        return v.reshape((1, -1) + (1,) * self.config.ndim)

    def forward(self, x):
        """x: (B, C_in, *grid) -> mean, variance (B, L, *grid), params (B, n_params) or None."""
        if x.shape[1] != self.config.in_channels:
            raise ChannelMismatch(f"expected {self.config.in_channels} channels, got {x.shape[1]}")
        h = (x - self._bshape(self.in_mean)) / self._bshape(self.in_std)
        h = self.lift(torch.cat([h, self._coords(x)], dim=1))
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = F.gelu(h)
        h = F.gelu(self.boundary(h))
        out = self.proj2(F.gelu(self.proj1(h)))
        L = self.config.out_channels
        mean = self._bshape(self.out_mean) + self._bshape(self.out_std) * out[:, :L]
        var = (F.softplus(out[:, L:]) + 1e-6) * self._bshape(self.out_std) ** 2
        params = None
        if self.param_head is not None:
            pooled = h.flatten(2).mean(-1)
            params = self.param_mean + self.param_std * self.param_head(pooled)
        return mean, var, params


def lfo_forward(net: LFONet, solution) -> tuple[torch.Tensor, torch.Tensor]:
    """Single instance: solution (C_in, *grid) -> (mean, variance), each (L, *grid)."""
    x = torch.as_tensor(np.asarray(solution, dtype=np.float64)) if not isinstance(solution, torch.Tensor) else solution
    with torch.no_grad():
        mean, var, _ = net(x.to(DTYPE)[None])
    return mean[0], var[0]


# -- datasets ----------------------------------------------------------------

@dataclass
class InstanceDataset:
    """Stacked instances: solutions (n, C, *grid), forces (n, L, *grid), params (n, k)."""

    solutions: np.ndarray
    forces: np.ndarray
    params: np.ndarray
    manifest: dict
    times: Optional[np.ndarray] = None
    space: Optional[np.ndarray] = None

    def __len__(self):
        return self.solutions.shape[0]


def _instance_arrays(inst):
    from .synthetic import Instance  # noqa: F401

    if inst.family == "reaction_diffusion":
        sol = inst.Y[None]
        force = inst.force[None]
        params = np.array([inst.params["sensitivity"], inst.params["decay"], inst.params["diffusion"]])
    elif inst.family == "transcription":
        sol = inst.Y.T
        force = inst.force.T
        p = inst.params
        params = np.concatenate([p["basal"], p["sensitivity"], p["decay"]])
    else:
        sol = inst.Y.T
        force = inst.force.T
        params = np.array([inst.params["growth"], inst.params["decay"]])
    return sol, force, params


def param_names(family: str, n_outputs: int = 5) -> list[str]:
    if family == "transcription":
        return [f"{k}_{j}" for k in ("basal", "sensitivity", "decay") for j in range(n_outputs)]
    if family == "lotka":
        return ["growth", "decay"]
    return ["sensitivity", "decay", "diffusion"]


def _generate_one(args):
    from .synthetic import make_instance

    family, seed, i, kw = args
    try:
        return i, make_instance(family, seed, i, **kw), None
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
        return i, None, f"{type(exc).__name__}: {exc}"


def generate_dataset(family: str, n: int, seed: int, workers: int = 1, **instance_kw) -> InstanceDataset:
    """Draw ``n`` instances; failures are skipped and listed in the manifest."""
    if n < 1:
        raise ValueError("need at least one instance")
    jobs = [(family, seed, i, instance_kw) for i in range(n)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_generate_one, jobs, chunksize=16))
    else:
        results = [_generate_one(j) for j in jobs]
    sols, forces, params, kept, skipped = [], [], [], [], []
    times = space = None
    for i, inst, err in results:
        if inst is None:
            log.warning("instance %d skipped: %s", i, err)
            skipped.append({"index": i, "reason": err})
            continue
        s, f, p = _instance_arrays(inst)
        sols.append(s)
        forces.append(f)
        params.append(p)
        kept.append(i)
        times, space = inst.times, inst.space
    sols = np.stack(sols)
    manifest = {
        "model_family": family,
        "count": len(kept),
        "seed": int(seed),
        "grid": list(sols.shape[2:]),
        "channels": int(sols.shape[1]),
        "force_channels": int(forces[0].shape[0]),
        "param_names": param_names(family, sols.shape[1]),
        "indices": kept,
        "skipped": skipped,
        "generator": {k: (list(v) if isinstance(v, tuple) else v) for k, v in instance_kw.items()},
    }
    return InstanceDataset(sols, np.stack(forces), np.stack(params), manifest, times, space)


# -- training ----------------------------------------------------------------

def gaussian_nll(mean, var, target) -> torch.Tensor:
    return (0.5 * torch.log(2 * math.pi * var) + (target - mean) ** 2 / (2 * var)).mean()


def split_indices(n: int, val_fraction: float = 0.1):
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return np.arange(n - n_val), np.arange(n - n_val, n)


def fit_normalisation(net: LFONet, dataset: InstanceDataset, train_idx):
    ax = (0,) + tuple(range(2, dataset.solutions.ndim))
    s = dataset.solutions[train_idx]
    f = dataset.forces[train_idx]
    with torch.no_grad():
        net.in_mean.copy_(torch.tensor(s.mean(ax)))
        net.in_std.copy_(torch.tensor(np.maximum(s.std(ax), 1e-8)))
        net.out_mean.copy_(torch.tensor(f.mean(ax)))
        net.out_std.copy_(torch.tensor(np.maximum(f.std(ax), 1e-8)))
        if net.param_head is not None:
            p = dataset.params[train_idx]
            net.param_mean.copy_(torch.tensor(p.mean(0)))
            net.param_std.copy_(torch.tensor(np.maximum(p.std(0), 1e-8)))


@dataclass
class LFOTrace:
    epochs: list = field(default_factory=list)  # (epoch, train_nll, val_nll, seconds)


def train_lfo(net: LFONet, dataset: InstanceDataset, epochs: int = 50, lr: float = 1e-3,
              batch_size: int = 32, seed: int = 0, param_weight: float = 1.0,
              val_fraction: float = 0.1) -> LFOTrace:
    """Minimise Gaussian NLL of true forces (plus squared error on the parameter head)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    from .lfm import NonFiniteLoss

    train_idx, val_idx = split_indices(len(dataset), val_fraction)
    if val_idx.size == 0:
        val_idx = train_idx
    fit_normalisation(net, dataset, train_idx)
    X = torch.tensor(dataset.solutions)
    Y = torch.tensor(dataset.forces)
    P = torch.tensor(dataset.params)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    steps_per_epoch = max(1, math.ceil(train_idx.size / batch_size))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=max(1, epochs * steps_per_epoch))
    trace = LFOTrace()

    def loss_on(idx):
        mean, var, params = net(X[idx])
        loss = gaussian_nll(mean, var, Y[idx])
        if params is not None and param_weight > 0:
            loss = loss + param_weight * (((params - P[idx]) / net.param_std) ** 2).mean()
        return loss

    for epoch in range(epochs):
        t0 = time.perf_counter()
        net.train()
        perm = train_idx[torch.randperm(train_idx.size, generator=gen).numpy()]
        total = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            opt.zero_grad()
            loss = loss_on(idx)
            if not bool(torch.isfinite(loss)):
                raise NonFiniteLoss(f"non-finite LFO loss at epoch {epoch}", trace.epochs)
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * idx.size
        net.eval()
        with torch.no_grad():
            mean, var, _ = net(X[val_idx])
            val = float(gaussian_nll(mean, var, Y[val_idx]))
        trace.epochs.append((epoch + 1, total / train_idx.size, val, time.perf_counter() - t0))
    return trace


def predict_dataset(net: LFONet, solutions, batch_size: int = 256):
    """Batched forward pass returning numpy (mean, var, params)."""
    X = torch.tensor(np.asarray(solutions, dtype=np.float64))
    means, vars_, params = [], [], []
    with torch.no_grad():
        for b in range(0, X.shape[0], batch_size):
            m, v, p = net(X[b:b + batch_size])
            means.append(m.numpy())
            vars_.append(v.numpy())
            if p is not None:
                params.append(p.numpy())
    return np.concatenate(means), np.concatenate(vars_), (np.concatenate(params) if params else None)
