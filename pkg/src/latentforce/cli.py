"""Command line entry point: generate, train, train-lfo, infer-lfo, eval, benchmark.

Exit codes: 0 ok, 2 configuration error, 3 file error, 4 non-finite loss,
5 checkpoint or grid incompatible with the data.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import io
from .experiments import (ConfigError, ExperimentConfig, build_model, config_to_dict, evaluate, instance_for,
                          lfo_generator_kw, lfo_net_for, lfo_scores, load_config, repeat_seeds)
from .lfm import NonFiniteLoss, train
from .lfo import ChannelMismatch, GridTooSmall, LFOConfig, LFONet, generate_dataset, split_indices, train_lfo
from .metrics import summarize
from .synthetic import Instance

log = logging.getLogger("latentforce")

EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_INCOMPATIBLE = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def worker_count() -> int:
    raw = os.environ.get("LFT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"LFT_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise ConfigError("LFT_THREADS must be >= 1")
    return n


def read_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config: {exc}")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    overrides = {"model": getattr(args, "model", None), "seed": args.seed}
    cfg = load_config(raw, **overrides)
    if getattr(args, "n", None) is not None:
        if args.n < 1:
            raise ConfigError("--n must be at least 1")
        cfg.lfo.n_instances = args.n
    if getattr(args, "preestimation_epochs", None) is not None:
        if args.preestimation_epochs < 0:
            raise ConfigError("--preestimation-epochs must be nonnegative")
        cfg.train = dataclasses.replace(cfg.train, preestimation_epochs=args.preestimation_epochs)
    if getattr(args, "data", None):
        cfg.data = args.data
    if getattr(args, "index", None) is not None:
        cfg.index = args.index
    if args.repeats < 1:
        raise ConfigError("--repeats must be at least 1")
    return cfg


def out_dir(args) -> Path:
    p = Path(args.out)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {p}: {exc}")
    return p


def dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


# -- instance plumbing -------------------------------------------------------------

def _params_dict(names, values) -> dict:
    out: dict = {}
    for n, v in zip(names, values):
        base, _, idx = n.rpartition("_")
        if base and idx.isdigit():
            out.setdefault(base, []).append(float(v))
        else:
            out[n] = float(v)
    return {k: (np.array(v) if isinstance(v, list) else v) for k, v in out.items()}


def instance_from_dataset(ds, k: int, family: str) -> Instance:
    """An Instance view of dataset entry ``k``; the observed solution doubles as output truth."""
    names = ds.manifest["param_names"]
    params = _params_dict(names, ds.params[k])
    if ds.space is None:
        Y = ds.solutions[k].T
        return Instance(family, ds.times, Y, Y, ds.forces[k].T, params)
    Y = ds.solutions[k][0]
    return Instance(family, ds.times, Y, Y, ds.forces[k][0], params, space=ds.space)


def load_instance(cfg: ExperimentConfig, seed: int) -> Instance:
    if cfg.data is None:
        return instance_for(cfg, seed)
    ds = read_dataset_checked(cfg.data)
    fam = ds.manifest.get("model_family", cfg.model)
    if fam != cfg.model:
        raise ConfigError(f"dataset holds {fam!r} instances but the model is {cfg.model!r}")
    if cfg.index not in ds.manifest["indices"]:
        raise ConfigError(f"instance {cfg.index} not in dataset")
    return instance_from_dataset(ds, ds.manifest["indices"].index(cfg.index), fam)


def read_dataset_checked(path):
    try:
        return io.read_dataset(path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_IO, f"cannot read dataset {path}: {exc}")


# -- commands ------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = read_config(args)
    out = out_dir(args)
    ds = generate_dataset(cfg.model, cfg.lfo.n_instances, cfg.seed, worker_count(),
                          **lfo_generator_kw(cfg, cfg.lfo.n_times))
    try:
        io.write_dataset(ds, out)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc))
    print(f"wrote {ds.manifest['count']} instances to {out}")
    return 0


def _write_trace(path, trace) -> None:
    io.write_table(path, ["epoch", "phase", "elbo"], [(e, ph, float(v)) for e, ph, v in trace])


def _train_one(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    inst = load_instance(cfg, seed)
    model, data = build_model(cfg, inst, seed)
    t0 = time.perf_counter()
    try:
        res = train(data, model, dataclasses.replace(cfg.train, seed=seed))
    except NonFiniteLoss as exc:
        _write_trace(out / "trace.csv", exc.trace or [])
        raise
    wall = time.perf_counter() - t0
    report = evaluate(model, inst, cfg.n_samples, seed)
    meta = {"kind": "lfm", "family": cfg.model, "seed": seed, "config": config_to_dict(cfg)}
    io.save_checkpoint(out / "model.ckpt", model, meta)
    _write_trace(out / "trace.csv", res.trace)
    dump_json(out / "metrics.json", report.to_dict())
    io.write_table(out / "timing.csv", ["phase", "epoch", "seconds"], res.seconds)
    dump_json(out / "timing.json", {"train_seconds": wall})
    return {"report": report, "seconds": wall}


def cmd_train(args) -> int:
    cfg = read_config(args)
    out = out_dir(args)
    seeds = repeat_seeds(cfg.seed, args.repeats)
    if len(seeds) == 1:
        r = _train_one(cfg, seeds[0], out)
        print(json.dumps({k: r["report"].to_dict()[k] for k in ("q2_output", "q2_latent", "param_mae")}))
        return 0
    reports = []
    for i, s in enumerate(seeds):
        sub = out / f"repeat_{i}"
        sub.mkdir(exist_ok=True)
        reports.append(_train_one(cfg, s, sub)["report"])
    summary = summarize(reports)
    summary["seeds"] = seeds
    dump_json(out / "metrics.json", summary)
    print(json.dumps({k: summary[k]["mean"] for k in ("q2_output", "q2_latent", "param_mae") if k in summary}))
    return 0


def _lfo_dataset(cfg: ExperimentConfig):
    if cfg.data is not None:
        return read_dataset_checked(cfg.data)
    return generate_dataset(cfg.model, cfg.lfo.n_instances, cfg.seed, worker_count(),
                            **lfo_generator_kw(cfg, cfg.lfo.n_times))


def cmd_train_lfo(args) -> int:
    cfg = read_config(args)
    out = out_dir(args)
    ds = _lfo_dataset(cfg)
    try:
        net = lfo_net_for(ds, cfg.lfo, cfg.seed)
        t0 = time.perf_counter()
        trace = train_lfo(net, ds, cfg.lfo.epochs, cfg.lfo.lr, cfg.lfo.batch_size, cfg.seed, cfg.lfo.param_weight)
    except GridTooSmall as exc:
        raise CliError(EXIT_INCOMPATIBLE, str(exc))
    except NonFiniteLoss as exc:
        io.write_table(out / "lfo_trace.csv", ["epoch", "train_nll", "val_nll"], [e[:3] for e in exc.trace or []])
        raise
    wall = time.perf_counter() - t0
    meta = {"kind": "lfo", "family": ds.manifest["model_family"], "seed": cfg.seed,
            "net": dataclasses.asdict(net.config), "grid": list(ds.solutions.shape[2:]),
            "param_names": ds.manifest["param_names"]}
    io.save_checkpoint(out / "lfo.ckpt", net, meta)
    io.write_table(out / "lfo_trace.csv", ["epoch", "train_nll", "val_nll"], [e[:3] for e in trace.epochs])
    _, val_idx = split_indices(len(ds))
    sub = dataclasses.replace(ds, solutions=ds.solutions[val_idx], forces=ds.forces[val_idx],
                              params=ds.params[val_idx])
    dump_json(out / "metrics.json", {"validation": lfo_scores(net, sub), "epochs": len(trace.epochs)})
    io.write_table(out / "timing.csv", ["phase", "epoch", "seconds"], [("lfo", e[0], e[3]) for e in trace.epochs])
    dump_json(out / "timing.json", {"train_seconds": wall})
    print(f"final val NLL {trace.epochs[-1][2]:.4f}" if trace.epochs else "no epochs run")
    return 0


def load_lfo(path) -> tuple[LFONet, dict]:
    try:
        header = io.read_checkpoint_header(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint: {exc}")
    except io.CheckpointError as exc:
        raise CliError(EXIT_INCOMPATIBLE, str(exc))
    if header.get("kind") != "lfo":
        raise CliError(EXIT_INCOMPATIBLE, "checkpoint is not an operator checkpoint")
    net_cfg = dict(header["net"])
    if isinstance(net_cfg.get("modes"), list):
        net_cfg["modes"] = tuple(net_cfg["modes"])
    net = LFONet(LFOConfig(**net_cfg))
    try:
        io.load_checkpoint(path, net)
    except io.CheckpointError as exc:
        raise CliError(EXIT_INCOMPATIBLE, str(exc))
    net.eval()
    return net, header


def _infer_input(args, cfg: ExperimentConfig):
    """(solution array (C, *grid), times, space)."""
    if args.instance:
        try:
            header, _ = io.read_csv(args.instance)
            if header[:2] == ["t", "x"]:
                t, x, v = io.read_pde_csv(args.instance)
                return v[None], t, x
            t, v, _ = io.read_ode_csv(args.instance)
            return v.T, t, None
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_IO, f"cannot read instance: {exc}")
    if cfg.data is None:
        raise ConfigError("infer-lfo needs --instance or --data")
    ds = read_dataset_checked(cfg.data)
    if cfg.index not in ds.manifest["indices"]:
        raise ConfigError(f"instance {cfg.index} not in dataset")
    k = ds.manifest["indices"].index(cfg.index)
    return ds.solutions[k], ds.times, ds.space


def cmd_infer_lfo(args) -> int:
    cfg = read_config(args)
    if not args.checkpoint:
        raise ConfigError("infer-lfo needs --checkpoint")
    out = out_dir(args)
    net, header = load_lfo(args.checkpoint)
    sol, times, space = _infer_input(args, cfg)
    x = torch.tensor(np.asarray(sol, dtype=np.float64))[None]
    try:
        with torch.no_grad():
            net(x)  # warm-up; also validates channels and grid
            t0 = time.perf_counter()
            mean, var, params = net(x)
            secs = time.perf_counter() - t0
    except (ChannelMismatch, GridTooSmall, RuntimeError) as exc:
        raise CliError(EXIT_INCOMPATIBLE, f"checkpoint does not fit the input: {exc}")
    mean, sd = mean[0].numpy(), np.sqrt(var[0].numpy())
    L = mean.shape[0]
    cols = [c for j in range(L) for c in (f"force_{j}_mean", f"force_{j}_sigma")]
    if space is None:
        vals = np.stack([a for j in range(L) for a in (mean[j], sd[j])], 1)
        io.write_table(out / "force_pred.csv", ["t"] + cols, [[float(t)] + [float(v) for v in row]
                                                              for t, row in zip(times, vals)])
    else:
        vals = np.stack([a for j in range(L) for a in (mean[j], sd[j])], -1)
        io.write_pde_csv(out / "force_pred.csv", times, space, vals, cols)
    if params is not None:
        dump_json(out / "params_pred.json", dict(zip(header.get("param_names", []), params[0].tolist())))
    dump_json(out / "timing.json", {"inference_seconds": secs})
    return 0


def cmd_eval(args) -> int:
    cfg = read_config(args)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    out = out_dir(args)
    try:
        header = io.read_checkpoint_header(args.checkpoint)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint: {exc}")
    except io.CheckpointError as exc:
        raise CliError(EXIT_INCOMPATIBLE, str(exc))
    if header.get("kind") == "lfo":
        net, _ = load_lfo(args.checkpoint)
        if cfg.data is None:
            raise ConfigError("eval of an operator needs --data")
        ds = read_dataset_checked(cfg.data)
        try:
            scores = lfo_scores(net, ds)
        except (ChannelMismatch, GridTooSmall, RuntimeError) as exc:
            raise CliError(EXIT_INCOMPATIBLE, str(exc))
        dump_json(out / "metrics.json", scores)
        print(json.dumps({"q2_latent": scores["q2_latent"]}))
        return 0
    if header.get("kind") != "lfm":
        raise CliError(EXIT_INCOMPATIBLE, "unknown checkpoint kind")
    saved = load_config({k: v for k, v in header["config"].items()})
    seed = int(header["seed"])
    inst = load_instance(saved, seed)
    model, _ = build_model(saved, inst, seed)
    try:
        io.load_checkpoint(args.checkpoint, model)
    except io.CheckpointError as exc:
        raise CliError(EXIT_INCOMPATIBLE, str(exc))
    report = evaluate(model, inst, saved.n_samples, seed)
    dump_json(out / "metrics.json", report.to_dict())
    print(json.dumps({k: report.to_dict()[k] for k in ("q2_output", "q2_latent", "param_mae")}))
    return 0


def cmd_benchmark(args) -> int:
    cfg = read_config(args)
    out = out_dir(args)
    rows = []
    inst = instance_for(cfg, cfg.seed)
    for label, pre in (("lfm", cfg.train.preestimation_epochs), ("lfm_nopre", 0)):
        model, data = build_model(cfg, inst, cfg.seed)
        res = train(data, model, dataclasses.replace(cfg.train, seed=cfg.seed, preestimation_epochs=pre))
        rows += [(f"{label}_{ph}", e, s) for ph, e, s in res.seconds]
    ds = generate_dataset(cfg.model, cfg.lfo.n_instances, cfg.seed, worker_count(),
                          **lfo_generator_kw(cfg, cfg.lfo.n_times))
    net = lfo_net_for(ds, cfg.lfo, cfg.seed)
    trace = train_lfo(net, ds, cfg.lfo.epochs, cfg.lfo.lr, cfg.lfo.batch_size, cfg.seed, cfg.lfo.param_weight)
    rows += [("lfo", e[0] - 1, e[3]) for e in trace.epochs]
    io.write_table(out / "benchmark.csv", ["phase", "epoch", "seconds"], rows)
    print(f"wrote {len(rows)} timing rows")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "train-lfo": cmd_train_lfo,
            "infer-lfo": cmd_infer_lfo, "eval": cmd_eval, "benchmark": cmd_benchmark}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentforce", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON experiment config")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default="out")
        s.add_argument("--repeats", type=int, default=1)
        s.add_argument("--model", choices=("transcription", "lotka", "reaction_diffusion"))
        s.add_argument("--n", type=int, help="number of instances to generate")
        s.add_argument("--preestimation-epochs", type=int, dest="preestimation_epochs")
        s.add_argument("--data", help="dataset directory")
        s.add_argument("--index", type=int, help="instance index within --data")
        s.add_argument("--checkpoint")
        s.add_argument("--instance", help="solution CSV for infer-lfo")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NonFiniteLoss as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
