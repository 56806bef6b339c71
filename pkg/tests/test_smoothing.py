import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ditas.smoothing import (
    ON_THE_FLY,
    ActivationTrace,
    SmoothingFactor,
    apply_smoothing,
    collect_absmax,
    compute_tas_factor,
    fold_smoothing,
    merge_absmax,
    weight_absmax,
)
from ditas.tensor import ShapeError


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_absmax_aggregates_over_timesteps():
    x = np.zeros((1, 2, 2, 3))
    x[0, 0, 0, 1] = 2.0
    x[0, 1, 0, 1] = -8.0
    x[0, 1, 1, 1] = 1.0
    a = collect_absmax(ActivationTrace(x))
    assert a[1] == 8.0
    assert a[0] == 0.0 and a[2] == 0.0


def test_absmax_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    expected = [0.0] * 5
    for b in range(2):
        for t in range(3):
            for l in range(4):
                for c in range(5):
                    expected[c] = max(expected[c], abs(x[b, t, l, c]))
    assert np.array_equal(collect_absmax(ActivationTrace(x)), np.array(expected))


def test_trace_validation(rng):
    with pytest.raises(ValueError):
        ActivationTrace(np.zeros((0, 1, 1, 2)))
    with pytest.raises(ShapeError):
        ActivationTrace(np.zeros((2, 2)))
    x = rng.standard_normal((1, 2, 2, 3))
    ActivationTrace(x, absmax=np.abs(x).max(axis=(0, 1, 2)))
    with pytest.raises(ValueError):
        ActivationTrace(x, absmax=np.ones(3))


def test_aggregate_dominates_single_timestep(rng):
    trace = ActivationTrace(rng.standard_normal((3, 6, 4, 5)) * rng.uniform(0.1, 3, (1, 6, 1, 1)))
    full = collect_absmax(trace)
    for t in range(6):
        assert np.all(full >= collect_absmax(ActivationTrace(trace.x[:, t : t + 1])))


def test_shard_merge_equals_full(rng):
    x = rng.standard_normal((4, 3, 2, 6))
    shards = [collect_absmax(ActivationTrace(x[i : i + 1])) for i in range(4)]
    assert np.array_equal(merge_absmax(*shards), collect_absmax(ActivationTrace(x)))


def test_weight_absmax():
    assert np.array_equal(weight_absmax(np.array([[1.0, -5.0], [-3.0, 2.0]])), [3.0, 5.0])


def test_tas_factor_values():
    assert compute_tas_factor([4.0], [1.0], 0.5).s[0] == 2.0
    a, b = np.array([3.0, 0.5]), np.array([2.0, 7.0])
    assert np.allclose(compute_tas_factor(a, b, 1.0).s, a, rtol=1e-15)
    assert np.allclose(compute_tas_factor(a, b, 0.0).s, 1.0 / b, rtol=1e-15)


def test_tas_factor_zero_channels_finite():
    s = compute_tas_factor([0.0, 2.0], [0.0, 0.0], 0.5).s
    assert np.all(np.isfinite(s)) and np.all(s > 0)


def test_tas_factor_errors():
    with pytest.raises(ShapeError):
        compute_tas_factor([1.0, 2.0], [1.0], 0.5)
    with pytest.raises(ValueError):
        compute_tas_factor([1.0], [1.0], 1.5)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.01, 100.0))
def test_tas_factor_scale_covariant(seed, alpha, k):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0.1, 10, 6), rng.uniform(0.1, 10, 6)
    s1 = compute_tas_factor(a, b, alpha).s
    s2 = compute_tas_factor(k * a, b, alpha).s
    assert np.allclose(s2, s1 * k**alpha, rtol=1e-12)


def test_apply_smoothing_identity(rng):
    x, w = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))
    xs, ws = apply_smoothing(x, w, SmoothingFactor(np.ones(4)))
    assert np.array_equal(xs, x) and np.array_equal(ws, w)


def test_outlier_equalisation():
    # channel 0 reaches 100, the others 1; weights all-ones
    x = np.ones((1, 1, 3, 4))
    x[0, 0, 1, 0] = 100.0
    trace = ActivationTrace(x)
    w = np.ones((2, 4))
    s = compute_tas_factor(collect_absmax(trace), weight_absmax(w), 0.5)
    xs, _ = apply_smoothing(trace.x, w, s)
    per_channel = np.abs(xs).max(axis=(0, 1, 2))
    assert np.allclose(per_channel, [10.0, 1.0, 1.0, 1.0])
    assert per_channel.max() / per_channel.min() == pytest.approx(10.0)
    assert np.allclose(s.s, np.sqrt(collect_absmax(trace)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_full_precision_invariance(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((2, 5, 6)), rng.standard_normal((3, 6))
    s = SmoothingFactor(np.exp(rng.uniform(-4, 4, 6)))
    xs, ws = apply_smoothing(x, w, s)
    assert rel_fro(xs @ ws.T, x @ w.T) < 1e-9


def test_apply_smoothing_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        apply_smoothing(rng.standard_normal((2, 3)), rng.standard_normal((2, 4)), np.ones(4))


def test_fold_identity_producer():
    folded, bias = fold_smoothing(np.eye(2), SmoothingFactor(np.array([2.0, 4.0])))
    assert np.array_equal(folded, np.diag([0.5, 0.25]))
    assert bias is None


def test_fold_without_producer():
    assert fold_smoothing(None, np.array([2.0])) is ON_THE_FLY


def test_fold_composition(rng):
    p, pb = rng.standard_normal((5, 3)), rng.standard_normal(5)
    w = rng.standard_normal((4, 5))
    s = SmoothingFactor(rng.uniform(0.2, 5.0, 5))
    x = rng.standard_normal((7, 3))
    fp, fb = fold_smoothing(p, s, pb)
    _, ws = apply_smoothing(np.zeros((1, 5)), w, s)
    folded = (x @ fp.T + fb) @ ws.T
    original = (x @ p.T + pb) @ w.T
    assert rel_fro(folded, original) < 1e-9


def test_fold_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        fold_smoothing(rng.standard_normal((3, 3)), np.ones(4))
