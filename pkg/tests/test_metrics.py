import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentforce.metrics import (LengthMismatch, MetricReport, ZeroVariance, coverage_deviation, param_mae, q2,
                                 summarize)


def test_q2_examples():
    t = np.array([0.0, 1.0, 2.0])
    assert q2(t, t) == 100.0
    assert q2(np.full(3, t.mean()), t) == pytest.approx(0.0, abs=1e-12)
    assert q2([0.0, 1.0, 3.0], t) == pytest.approx(50.0, abs=1e-12)


def test_q2_errors():
    with pytest.raises(ZeroVariance):
        q2([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ZeroVariance):
        q2([1.0], [3.0])
    with pytest.raises(LengthMismatch):
        q2([1.0, 2.0], [1.0, 2.0, 3.0])


def test_coverage_examples(rng):
    t = rng.standard_normal(20)
    assert coverage_deviation(t, np.full(20, 0.3), t) == pytest.approx(32.0)
    assert coverage_deviation(t + 5, np.ones(20), t) == pytest.approx(-68.0)
    z = rng.standard_normal(100_000)
    assert abs(coverage_deviation(np.zeros_like(z), np.ones_like(z), z) - 0.27) < 0.5
    with pytest.raises(ValueError):
        coverage_deviation([0.0], [0.0], [0.0])


def test_param_mae_examples():
    v = np.array([0.2, 0.7, 1.1])
    assert param_mae(v, v) == 0.0
    assert param_mae(v + 0.5, v) == pytest.approx(0.5)
    with pytest.raises(LengthMismatch):
        param_mae([1.0], [1.0, 2.0])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 12, elements=finite), arrays(np.float64, 12, elements=finite),
       st.floats(0.1, 10), st.floats(-10, 10))
def test_q2_affine_invariance_and_bound(pred, target, a, b):
    if target.var() < 1e-6:
        return
    base = q2(pred, target)
    assert base <= 100.0
    assert q2(a * pred + b, a * target + b) == pytest.approx(base, rel=1e-6, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 15, elements=finite), st.floats(0.01, 5), st.floats(0.0, 5))
def test_coverage_monotone_in_sigma(target, s, extra):
    mean = np.zeros_like(target)
    lo = coverage_deviation(mean, np.full(15, s), target)
    hi = coverage_deviation(mean, np.full(15, s + extra), target)
    assert -68 <= lo <= hi <= 32


def test_summarize_order_and_stats():
    reps = [MetricReport(q2_output=90.0, param_mae=0.1), MetricReport(q2_output=100.0, param_mae=0.3)]
    s = summarize(reps)
    assert s["repeats"] == 2
    assert s["q2_output"]["mean"] == 95.0 and s["q2_output"]["values"] == [90.0, 100.0]
    assert s["param_mae"]["std"] == pytest.approx(0.1)
    assert "q2_latent" not in s
