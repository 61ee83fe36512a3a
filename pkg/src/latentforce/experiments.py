"""Experiment configs and runners shared by the CLI and the scripts."""
from __future__ import annotations

import copy
import dataclasses
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .kernels import make_kernel, periodogram_period
from .lfm import (LotkaVolterraLFM, ODEData, PDEData, ReactionDiffusionLFM, ResponseFn, TrainConfig,
                  TranscriptionLFM, train)
from .metrics import MetricReport, coverage_deviation, param_mae, q2, summarize
from .synthetic import FAMILIES, Instance, make_instance


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------------

@dataclass
class KernelSpec:
    name: str = "rbf"
    lengthscale: Optional[object] = None
    period: Optional[float] = None
    period_init: str = "half_span"  # or "periodogram"
    variance: float = 1.0


@dataclass
class ResponseSpec:
    kind: str = "identity"
    weights: Optional[list] = None
    offsets: Optional[list] = None


@dataclass
class SolverSpec:
    method: str = "rk4"
    step_fraction: int = 4
    rtol: float = 1e-5
    atol: float = 1e-7


@dataclass
class LFOSpec:
    n_instances: int = 2000
    n_test: int = 100
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 32
    width: int = 32
    modes: object = 8
    n_times: int = 32
    eval_times: int = 64
    param_weight: float = 1.0


@dataclass
class ExperimentConfig:
    model: str = "transcription"
    seed: int = 0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    response: ResponseSpec = field(default_factory=ResponseSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverSpec = field(default_factory=SolverSpec)
    generator: dict = field(default_factory=dict)
    frozen: dict = field(default_factory=lambda: {"basal": 0.5, "sensitivity": 1.0, "decay": 0.5})
    num_inducing: object = 16
    n_elements: int = 20
    substeps: int = 4
    n_samples: int = 50
    data: Optional[str] = None
    index: int = 0
    lfo: LFOSpec = field(default_factory=LFOSpec)


_NESTED = {"kernel": KernelSpec, "response": ResponseSpec, "train": TrainConfig, "solver": SolverSpec,
           "lfo": LFOSpec}


def default_config(model: str = "transcription") -> ExperimentConfig:
    if model not in FAMILIES:
        raise ConfigError(f"unknown model family {model!r}; expected one of {FAMILIES}")
    cfg = ExperimentConfig(model=model)
    if model == "lotka":
        cfg.kernel = KernelSpec("periodic", period_init="periodogram")
        cfg.response = ResponseSpec("softplus")
        cfg.solver.step_fraction = 2
        cfg.train.finetune_epochs = 300
        cfg.num_inducing = 20
        cfg.frozen = {}
    elif model == "reaction_diffusion":
        cfg.num_inducing = [12, 12]
        cfg.frozen = {}
        cfg.lfo.modes = [12, 12]
        cfg.train.finetune_epochs = 150
    return cfg


def _merge(base: dict, over: dict, path: str) -> dict:
    out = dict(base)
    for key, value in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path}{key}")
        if key in _NESTED and path == "":
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be an object")
            out[key] = _merge(base[key], value, f"{key}.")
        else:
            out[key] = value
    return out


def load_config(raw: Optional[dict] = None, **overrides) -> ExperimentConfig:
    """Validate a JSON-like dict against the schema; unknown keys are rejected."""
    raw = dict(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for k, v in overrides.items():
        if v is not None:
            raw[k] = v
    model = raw.get("model", "transcription")
    base = asdict(default_config(model))
    merged = _merge(base, raw, "")
    try:
        nested = {k: cls(**merged[k]) for k, cls in _NESTED.items()}
        rest = {k: v for k, v in merged.items() if k not in _NESTED}
        cfg = ExperimentConfig(**rest, **nested)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.kernel.name not in ("rbf", "periodic"):
        raise ConfigError(f"unknown kernel {cfg.kernel.name!r}")
    if cfg.kernel.period_init not in ("half_span", "periodogram"):
        raise ConfigError("period_init must be half_span or periodogram")
    if cfg.response.kind not in ("identity", "softplus", "hill"):
        raise ConfigError(f"unknown response {cfg.response.kind!r}")
    if cfg.solver.method not in ("rk4", "adaptive"):
        raise ConfigError(f"unknown solver {cfg.solver.method!r}")
    if cfg.n_samples < 1 or cfg.lfo.epochs < 0 or cfg.lfo.n_instances < 1:
        raise ConfigError("sample and instance counts must be positive")
    if not isinstance(cfg.generator, dict) or not isinstance(cfg.frozen, dict):
        raise ConfigError("generator and frozen must be objects")
    bad = set(cfg.frozen) - {"basal", "sensitivity", "decay"}
    if bad:
        raise ConfigError(f"cannot freeze {sorted(bad)}")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def with_train(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    out = copy.deepcopy(cfg)
    out.train = dataclasses.replace(out.train, **kw)
    return out


# -- model construction and evaluation -----------------------------------------

def instance_for(cfg: ExperimentConfig, seed: int) -> Instance:
    return make_instance(cfg.model, seed, cfg.index, **cfg.generator)


def _response(cfg: ExperimentConfig) -> ResponseFn:
    r = cfg.response
    kw = {}
    if r.weights is not None:
        kw["weights"] = np.asarray(r.weights, dtype=np.float64)
    if r.offsets is not None:
        kw["offsets"] = np.asarray(r.offsets, dtype=np.float64)
    try:
        return ResponseFn(r.kind, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_model(cfg: ExperimentConfig, inst: Instance, seed: int):
    """Returns (model, data) for one instance."""
    rng = np.random.default_rng(seed)
    k = cfg.kernel
    torch.manual_seed(seed)
    if cfg.model == "reaction_diffusion":
        data = PDEData(inst.times, inst.space, inst.Y)
        tt, xx = np.meshgrid(inst.times, inst.space, indexing="ij")
        X = np.stack([tt.ravel(), xx.ravel()], 1)
        kernel = make_kernel("rbf", X, k.lengthscale, variance=k.variance)
        model = ReactionDiffusionLFM(data, kernel, _response(cfg), n_elements=cfg.n_elements,
                                     substeps=cfg.substeps, inducing=tuple(np.atleast_1d(cfg.num_inducing)),
                                     rng=rng, noise_init=cfg.train.noise_init, jitter=cfg.train.jitter)
        return model, data
    data = ODEData(inst.times, inst.Y)
    period = k.period
    if k.name == "periodic" and period is None and k.period_init == "periodogram":
        period = periodogram_period(inst.times, inst.Y)
    kernel = make_kernel(k.name, inst.times, k.lengthscale, period, k.variance)
    common = dict(num_inducing=int(cfg.num_inducing), y0=inst.Y[0], solver=cfg.solver.method,
                  step_fraction=cfg.solver.step_fraction, rtol=cfg.solver.rtol, atol=cfg.solver.atol,
                  noise_init=cfg.train.noise_init, jitter=cfg.train.jitter)
    if cfg.model == "transcription":
        model = TranscriptionLFM(inst.times, inst.Y.shape[1], kernel, _response(cfg),
                                 frozen_gene=0 if cfg.frozen else None, frozen=cfg.frozen, rng=rng, **common)
    else:
        model = LotkaVolterraLFM(inst.times, kernel, _response(cfg), rng=rng, **common)
    return model, data


def _band(samples: torch.Tensor):
    s = samples.numpy()
    return s.mean(0), np.maximum(s.std(0), 1e-12)


def free_params(model, params: dict):
    """Estimated and true values of the non-frozen equation parameters."""
    est = model.equation_params()
    if model.family == "transcription":
        mask = model.free_mask()
        kinds = model.kinds
        return (np.concatenate([np.ravel(est[k]) for k in kinds])[mask],
                np.concatenate([np.ravel(params[k]) for k in kinds])[mask])
    keys = ("growth", "decay") if model.family == "lotka" else ("sensitivity", "decay", "diffusion")
    return np.array([est[k] for k in keys], float), np.array([params[k] for k in keys], float)


def evaluate(model, inst: Instance, n_samples: int = 50, seed: int = 0) -> MetricReport:
    """Metrics against the noiseless truth carried by a synthetic instance."""
    extra = {}
    clean = inst.Y_clean
    if model.family == "reaction_diffusion":
        fields_, G = model.predict(n_samples, seed)
        ti, xi = model.data_time_idx, model.data_node_idx
        out_m, out_s = _band(fields_[:, ti][:, :, xi])
        lat_m, lat_s = _band(G[:, ti][:, :, xi])
        lat_truth = inst.force
    else:
        out, _, _ = model.predict(inst.times, n_samples, seed)
        out_m, out_s = _band(out)
        if inst.dense_times is not None and model.family == "transcription":
            _, G, _ = model.predict(inst.dense_times, n_samples, seed)
            lat_truth = inst.dense_force
        else:
            _, G, _ = model.predict(inst.times, n_samples, seed)
            lat_truth = inst.force
        lat_m, lat_s = _band(G)
        if model.family == "lotka" and "test_times" in inst.extra:
            allt = np.concatenate([inst.times, inst.extra["test_times"]])
            out_all, _, _ = model.predict(allt, n_samples, seed)
            extra["q2_extrapolation"] = q2(out_all.numpy().mean(0)[inst.times.size:], inst.extra["test_Y_clean"])
    est, true = free_params(model, inst.params)
    extra["params"] = {k: np.ravel(v).tolist() for k, v in model.equation_params().items()}
    return MetricReport(
        q2_output=q2(out_m, clean), q2_latent=q2(lat_m, lat_truth),
        coverage_output=coverage_deviation(out_m, out_s, clean),
        coverage_latent=coverage_deviation(lat_m, lat_s, lat_truth),
        param_mae=param_mae(est, true), n_outputs=int(np.size(clean)), n_latent=int(np.size(lat_truth)),
        extra=extra)


@dataclass
class RunResult:
    model: object
    trace: list
    seconds: list
    report: MetricReport
    wall: float


def run_lfm(cfg: ExperimentConfig, seed: int, inst: Optional[Instance] = None) -> RunResult:
    inst = instance_for(cfg, seed) if inst is None else inst
    t0 = time.perf_counter()
    model, data = build_model(cfg, inst, seed)
    res = train(data, model, dataclasses.replace(cfg.train, seed=seed))
    wall = time.perf_counter() - t0
    report = evaluate(model, inst, cfg.n_samples, seed)
    return RunResult(model, res.trace, res.seconds, report, wall)


def repeat_seeds(seed: int, repeats: int) -> list[int]:
    return [int(seed) + r for r in range(repeats)]


def run_repeats(cfg: ExperimentConfig, repeats: int, workers: int = 1) -> tuple[list[RunResult], dict]:
    """Independent runs with seeds seed, seed+1, ...; aggregation keeps seed order."""
    seeds = repeat_seeds(cfg.seed, repeats)
    if workers > 1 and repeats > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_detached, [(cfg, s) for s in seeds]))
    else:
        results = [run_lfm(cfg, s) for s in seeds]
    return results, summarize([r.report for r in results])


def _run_detached(args):
    torch.set_num_threads(1)
    cfg, seed = args
    return run_lfm(cfg, seed)


# -- specific comparisons --------------------------------------------------------

def epochs_to_threshold(elbos, threshold: float) -> Optional[int]:
    """1-based number of epochs until the ELBO first reaches ``threshold``."""
    for i, v in enumerate(elbos):
        if v >= threshold:
            return i + 1
    return None


def preestimation_comparison(cfg: ExperimentConfig, seeds, fraction: float = 0.95) -> list[dict]:
    """Same data and fine-tune budget with and without gradient-matching pre-estimation.

    The threshold is the point where the run without pre-estimation has made
    ``fraction`` of its total ELBO improvement. Epochs count solver-based
    fine-tune epochs; ``seconds_*`` is wall time to the threshold including
    any pre-estimation.
    """
    rows = []
    for seed in seeds:
        inst = instance_for(cfg, seed)
        runs = {}
        for label, pre in (("pre", cfg.train.preestimation_epochs), ("random", 0)):
            model, data = build_model(cfg, inst, seed)
            res = train(data, model, dataclasses.replace(cfg.train, seed=seed, preestimation_epochs=pre))
            fine = [e for _, ph, e in res.trace if ph == "fine"]
            pre_secs = sum(t for ph, _, t in res.seconds if ph == "pre")
            fine_secs = np.cumsum([t for ph, _, t in res.seconds if ph == "fine"])
            runs[label] = (fine, pre_secs, fine_secs)
        rnd, pre = runs["random"][0], runs["pre"][0]
        threshold = rnd[0] + fraction * (max(rnd) - rnd[0])
        row = {"seed": seed, "first_pre": pre[0], "first_random": rnd[0], "threshold": threshold}
        for label in ("pre", "random"):
            fine, pre_secs, fine_secs = runs[label]
            ep = epochs_to_threshold(fine, threshold)
            row["epochs_" + label] = ep
            row["seconds_" + label] = None if ep is None else float(pre_secs + fine_secs[ep - 1])
        rows.append(row)
    return rows


def kernel_comparison(cfg: ExperimentConfig, seeds, kernels=("periodic", "rbf")) -> list[dict]:
    """Held-out extrapolation Q2 on Lotka-Volterra for each kernel."""
    rows = []
    for seed in seeds:
        inst = instance_for(cfg, seed)
        row = {"seed": seed}
        for name in kernels:
            c = copy.deepcopy(cfg)
            c.kernel.name = name
            run = run_lfm(c, seed, inst)
            row[name] = run.report.extra["q2_extrapolation"]
            row[name + "_fit"] = run.report.q2_output
        rows.append(row)
    return rows


# -- latent force operator ---------------------------------------------------------

def lfo_net_for(dataset, spec: LFOSpec, seed: int):
    from .lfo import LFOConfig, LFONet

    torch.manual_seed(seed)
    ndim = dataset.solutions.ndim - 2
    grid = dataset.solutions.shape[2:]
    if ndim == 1:
        modes = int(spec.modes)
    else:
        # short PDE time axes cannot hold the requested mode count
        req = np.broadcast_to(np.asarray(spec.modes), (2,))
        modes = tuple(int(min(m, n // 2)) for m, n in zip(req, grid))
    cfg = LFOConfig(in_channels=dataset.solutions.shape[1], out_channels=dataset.forces.shape[1],
                    width=spec.width, modes=modes, ndim=ndim, n_params=dataset.params.shape[1])
    return LFONet(cfg)


def lfo_generator_kw(cfg: ExperimentConfig, n_times: int) -> dict:
    kw = dict(cfg.generator)
    if cfg.model != "reaction_diffusion":
        kw["n_times"] = n_times
    return kw


def lfo_scores(net, dataset) -> dict:
    """Per-instance latent Q2 and coverage, averaged, plus parameter MAE."""
    from .lfo import predict_dataset

    mean, var, params = predict_dataset(net, dataset.solutions)
    q = [q2(m, f) for m, f in zip(mean, dataset.forces)]
    cov = [coverage_deviation(m, np.sqrt(v), f) for m, v, f in zip(mean, var, dataset.forces)]
    out = {"q2_latent": float(np.mean(q)), "q2_latent_std": float(np.std(q)),
           "q2_latent_pooled": q2(mean, dataset.forces), "coverage_latent": float(np.mean(cov)),
           "n_instances": len(dataset)}
    if params is not None:
        out["param_mae"] = param_mae(params, dataset.params)
    return out


def time_lfo_inference(net, solution, repeats: int = 20) -> float:
    """Median wall seconds of one single-instance forward pass."""
    from .lfo import lfo_forward

    lfo_forward(net, solution)
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        lfo_forward(net, solution)
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def lfo_experiment(cfg: ExperimentConfig, workers: int = 1, lfm_seconds: Optional[float] = None) -> dict:
    """Train on a generated set, score held-out sets at the training and a finer grid."""
    from .lfo import generate_dataset, train_lfo

    spec = cfg.lfo
    t0 = time.perf_counter()
    train_set = generate_dataset(cfg.model, spec.n_instances, cfg.seed, workers,
                                 **lfo_generator_kw(cfg, spec.n_times))
    gen_secs = time.perf_counter() - t0
    test_seed = cfg.seed + 1_000_003
    test = generate_dataset(cfg.model, spec.n_test, test_seed, workers, **lfo_generator_kw(cfg, spec.n_times))
    net = lfo_net_for(train_set, spec, cfg.seed)
    t0 = time.perf_counter()
    trace = train_lfo(net, train_set, spec.epochs, spec.lr, spec.batch_size, cfg.seed, spec.param_weight)
    train_secs = time.perf_counter() - t0
    result = {"trace": trace.epochs, "test": lfo_scores(net, test), "generate_seconds": gen_secs,
              "train_seconds": train_secs}
    if cfg.model != "reaction_diffusion" and spec.eval_times:
        fine = generate_dataset(cfg.model, spec.n_test, test_seed, workers,
                                **lfo_generator_kw(cfg, spec.eval_times))
        result["test_fine"] = lfo_scores(net, fine)
        result["super_resolution_drop"] = result["test"]["q2_latent"] - result["test_fine"]["q2_latent"]
    infer = time_lfo_inference(net, test.solutions[0])
    result["inference_seconds"] = infer
    if lfm_seconds is None:
        lfm_cfg = copy.deepcopy(cfg)
        lfm_seconds = run_lfm(lfm_cfg, cfg.seed).wall
    result["lfm_seconds"] = lfm_seconds
    result["speedup"] = lfm_seconds / infer
    result["net"] = net
    return result
