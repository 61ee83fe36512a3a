"""On-disk formats: CSV for numeric series, binary files for checkpoints.

Floats are written with ``repr`` (shortest round-trip form), so reading a
file and writing it back reproduces the same bytes.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .numcore import DTYPE


class CheckpointError(ValueError):
    """Checkpoint is malformed or does not fit the requested network."""


class TrajectoryFormatError(ValueError):
    pass


def _fmt(x) -> str:
    return repr(float(x))


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_ode_csv(path, times, values, prefix: str = "output") -> None:
    """``values`` is (N, P); columns are ``t,<prefix>_0,...``."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64).reshape(times.size, -1)
    if (np.diff(times) <= 0).any():
        raise TrajectoryFormatError("times must be strictly increasing")
    header = ",".join(["t"] + [f"{prefix}_{j}" for j in range(values.shape[1])])
    lines = [header] + [",".join([_fmt(t)] + [_fmt(v) for v in row]) for t, row in zip(times, values)]
    _write_text(path, "\n".join(lines) + "\n")


def write_pde_csv(path, times, space, values, column="value") -> None:
    """``values`` is (T, X) or (T, X, K); one row per (t, x), x fastest."""
    times = np.asarray(times, dtype=np.float64)
    space = np.asarray(space, dtype=np.float64)
    columns = [column] if isinstance(column, str) else list(column)
    values = np.asarray(values, dtype=np.float64).reshape(times.size, space.size, len(columns))
    if (np.diff(times) <= 0).any() or (np.diff(space) <= 0).any():
        raise TrajectoryFormatError("times and space must be strictly increasing")
    lines = [",".join(["t", "x"] + columns)]
    for t, row in zip(times, values):
        lines.extend(",".join([_fmt(t), _fmt(x)] + [_fmt(v) for v in vs]) for x, vs in zip(space, row))
    _write_text(path, "\n".join(lines) + "\n")


def write_table(path, columns, rows) -> None:
    """Generic CSV; floats use repr, everything else str."""
    def cell(v):
        return _fmt(v) if isinstance(v, (float, np.floating)) else str(v)

    lines = [",".join(columns)] + [",".join(cell(v) for v in r) for r in rows]
    _write_text(path, "\n".join(lines) + "\n")


def read_csv(path):
    """Returns (header, float array)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    rows = text.rstrip("\n").split("\n")
    header = rows[0].split(",")
    data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]], dtype=np.float64)
    return header, data.reshape(len(rows) - 1, len(header))


def read_ode_csv(path):
    """Returns (times, values (N, P), column names)."""
    header, data = read_csv(path)
    if header[0] != "t":
        raise TrajectoryFormatError(f"{path}: first column must be t")
    return data[:, 0], data[:, 1:], header[1:]


def read_pde_csv(path):
    """Returns (times, space, values (T, X)); extra value columns give (T, X, K)."""
    header, data = read_csv(path)
    if header[:2] != ["t", "x"] or len(header) < 3:
        raise TrajectoryFormatError(f"{path}: expected t,x,<value> columns")
    times = np.unique(data[:, 0])
    space = data[data[:, 0] == times[0], 1]
    if times.size * space.size != data.shape[0]:
        raise TrajectoryFormatError(f"{path}: rows do not form a full t-x lattice")
    vals = data[:, 2:].reshape(times.size, space.size, -1)
    return times, space, vals[..., 0] if vals.shape[-1] == 1 else vals


# -- datasets ----------------------------------------------------------------

def write_dataset(dataset, out) -> Path:
    """Write ``manifest.json`` plus three files per instance."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    m = dict(dataset.manifest)
    m["times"] = [float(t) for t in dataset.times]
    if dataset.space is not None:
        m["space"] = [float(x) for x in dataset.space]
    _write_text(out / "manifest.json", json.dumps(m, indent=2, sort_keys=True) + "\n")
    names = m["param_names"]
    for k, i in enumerate(m["indices"]):
        sol, force = dataset.solutions[k], dataset.forces[k]
        if dataset.space is None:
            write_ode_csv(out / f"inst_{i}_solution.csv", dataset.times, sol.T)
            write_ode_csv(out / f"inst_{i}_force.csv", dataset.times, force.T, prefix="force")
        else:
            write_pde_csv(out / f"inst_{i}_solution.csv", dataset.times, dataset.space, sol[0])
            write_pde_csv(out / f"inst_{i}_force.csv", dataset.times, dataset.space, force[0], column="force_0")
        params = {n: float(v) for n, v in zip(names, dataset.params[k])}
        _write_text(out / f"inst_{i}_params.json", json.dumps(params, indent=2) + "\n")
    return out


def read_dataset(path):
    from .lfo import InstanceDataset

    path = Path(path)
    with open(path / "manifest.json", encoding="utf-8") as fh:
        m = json.load(fh)
    times = np.array(m["times"])
    space = np.array(m["space"]) if "space" in m else None
    sols, forces, params = [], [], []
    for i in m["indices"]:
        if space is None:
            _, s, _ = read_ode_csv(path / f"inst_{i}_solution.csv")
            _, f, _ = read_ode_csv(path / f"inst_{i}_force.csv")
            sols.append(s.T)
            forces.append(f.T)
        else:
            sols.append(read_pde_csv(path / f"inst_{i}_solution.csv")[2][None])
            forces.append(read_pde_csv(path / f"inst_{i}_force.csv")[2][None])
        with open(path / f"inst_{i}_params.json", encoding="utf-8") as fh:
            p = json.load(fh)
        params.append([p[n] for n in m["param_names"]])
    if len(sols) != m["count"]:
        raise ValueError("manifest count does not match instance files")
    manifest = {k: v for k, v in m.items() if k not in ("times", "space")}
    return InstanceDataset(np.stack(sols), np.stack(forces), np.array(params, dtype=np.float64),
                           manifest, times, space)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, module: torch.nn.Module, meta: dict) -> None:
    """One JSON header line, then every state tensor as float64 little-endian.

    The header records tensor names and shapes in state-dict order, which is
    declaration order for parameters and buffers.
    """
    state = module.state_dict()
    header = dict(meta)
    header["tensors"] = [[k, list(v.shape)] for k, v in state.items()]
    flat = [v.detach().to(DTYPE).reshape(-1).numpy() for v in state.values()]
    blob = np.concatenate(flat).astype("<f8").tobytes() if flat else b""
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        return json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header") from exc


def load_checkpoint(path, module: torch.nn.Module) -> dict:
    """Fill ``module`` in place; returns the header."""
    with open(path, "rb") as fh:
        line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header") from exc
    state = module.state_dict()
    expected = [[k, list(v.shape)] for k, v in state.items()]
    if header.get("tensors") != expected:
        raise CheckpointError("checkpoint tensors do not match the network layout")
    arr = np.frombuffer(blob, dtype="<f8")
    total = sum(int(np.prod(s)) for _, s in expected)
    if arr.size != total:
        raise CheckpointError(f"expected {total} values, found {arr.size}")
    new, pos = {}, 0
    for name, shape in expected:
        n = int(np.prod(shape))
        new[name] = torch.tensor(arr[pos:pos + n].copy()).reshape(shape).to(state[name].dtype)
        pos += n
    module.load_state_dict(new)
    return header
