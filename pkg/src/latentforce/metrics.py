"""Evaluation metrics reported for latent force runs."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


class ZeroVariance(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


def q2(pred, target) -> float:
    """100 * (1 - MSE / population variance of target)."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise LengthMismatch("pred and target sizes differ")
    if target.size < 2:
        raise ZeroVariance("need at least two targets")
    var = target.var()
    if var == 0:
        raise ZeroVariance("target has zero variance")
    return float(100.0 * (1.0 - np.mean((pred - target) ** 2) / var))


def coverage_deviation(mean, sigma, target) -> float:
    """Signed percent of targets inside mean +- sigma, minus the nominal 68."""
    mean, sigma, target = (np.asarray(a, dtype=np.float64).ravel() for a in (mean, sigma, target))
    if (sigma <= 0).any():
        raise ValueError("sigma must be positive")
    inside = np.abs(target - mean) <= sigma
    return float(100.0 * inside.mean() - 68.0)


def param_mae(estimated, true) -> float:
    estimated = np.asarray(estimated, dtype=np.float64).ravel()
    true = np.asarray(true, dtype=np.float64).ravel()
    if estimated.shape != true.shape:
        raise LengthMismatch(f"{estimated.size} estimates vs {true.size} true values")
    return float(np.mean(np.abs(estimated - true)))


@dataclass
class MetricReport:
    q2_output: float | None = None
    q2_latent: float | None = None
    coverage_output: float | None = None
    coverage_latent: float | None = None
    param_mae: float | None = None
    n_outputs: int = 0
    n_latent: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(reports: list[MetricReport]) -> dict:
    """Mean and std of each numeric field across repeats, in report order."""
    out = {"repeats": len(reports)}
    for key in ("q2_output", "q2_latent", "coverage_output", "coverage_latent", "param_mae"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if vals:
            out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "values": [float(v) for v in vals]}
    return out
