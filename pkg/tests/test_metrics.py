import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nets.metrics import (MetricReport, deterministic_resample, kl_bound_estimate, mmd_rbf, reports_to_csv,
                          sinkhorn_w2, w2_distance)


def brute_w2(a, b):
    n = len(a)
    best = min(sum(np.sum((a[i] - b[s[i]]) ** 2) for i in range(n)) for s in itertools.permutations(range(n)))
    return np.sqrt(best / n)


def test_w2_identical_sets(rng):
    a = rng.normal(size=(50, 3))
    assert w2_distance(a, a[rng.permutation(50)]) == 0.0


def test_w2_singletons():
    assert w2_distance([[0.0, 0.0]], [[3.0, 0.0]]) == pytest.approx(3.0)


def test_w2_three_points():
    assert w2_distance([0.0, 1.0, 2.0], [0.5, 1.5, 2.5]) == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 6), d=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_w2_matches_brute_force(n, d, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(n, d)), r.normal(size=(n, d)) * 2
    assert w2_distance(a, b) == pytest.approx(brute_w2(a, b), rel=1e-10, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_w2_metric_axioms(seed):
    r = np.random.default_rng(seed)
    a, b, c = (r.normal(loc=r.normal(size=2), size=(64, 2)) for _ in range(3))
    ab, ba = w2_distance(a, b), w2_distance(b, a)
    assert ab == pytest.approx(ba, rel=1e-12)
    assert ab <= w2_distance(a, c) + w2_distance(c, b) + 1e-12


def test_w2_dimension_mismatch():
    with pytest.raises(ValueError):
        w2_distance(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        w2_distance(np.zeros((0, 2)), np.zeros((3, 2)))


def test_sinkhorn_is_close_but_above_exact(rng):
    a, b = rng.normal(size=(200, 2)), rng.normal(loc=1.0, size=(200, 2))
    exact = w2_distance(a, b)
    approx = sinkhorn_w2(a, b)
    assert approx >= exact - 1e-9
    assert approx == pytest.approx(exact, rel=0.15)


def test_w2_unequal_sizes_uses_sinkhorn(rng):
    a, b = rng.normal(size=(100, 1)), rng.normal(loc=3.0, size=(80, 1))
    assert w2_distance(a, b) == pytest.approx(3.0, rel=0.15)


def test_mmd_identical_sets_is_noise(rng):
    a = rng.normal(size=(100, 2))
    assert mmd_rbf(a, a) <= 1e-12


def test_mmd_far_clusters():
    a = np.zeros((10, 1)) + np.linspace(0, 1e-3, 10)[:, None]
    b = a + 100.0
    assert mmd_rbf(a, b) == pytest.approx(2.0, abs=1e-5)


def test_mmd_all_zero_two_by_two():
    assert mmd_rbf(np.zeros((2, 1)), np.zeros((2, 1))) == pytest.approx(0.0, abs=1e-15)


def test_mmd_hand_value():
    # a = {0, 1}, b = {0, 2}: k(0,1) = e^{-1/2}, k(0,2) = e^{-2}, k(1,2) = e^{-1/2}
    e = np.exp
    expect = e(-0.5) + e(-2.0) - 2 * (1 + e(-2.0) + e(-0.5) + e(-0.5)) / 4
    assert mmd_rbf([[0.0], [1.0]], [[0.0], [2.0]]) == pytest.approx(expect, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_mmd_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(12, 2)), r.normal(size=(9, 2))
    assert mmd_rbf(a, b) == pytest.approx(mmd_rbf(a[r.permutation(12)], b[r.permutation(9)]), rel=1e-10, abs=1e-14)


def test_mmd_needs_two_points():
    with pytest.raises(ValueError):
        mmd_rbf(np.zeros((1, 1)), np.zeros((3, 1)))


def test_kl_bound():
    assert kl_bound_estimate(0.0) == 0.0
    assert kl_bound_estimate(0.04) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        kl_bound_estimate(-1e-3)


def test_report_round_trip(rng):
    lw = rng.normal(size=50) * 0.3
    samples = rng.normal(size=(50, 2))
    rep = MetricReport.from_run([0.0, 0.5, 1.0], [1.0, 0.9, 0.8], lw, samples, rng.normal(size=(50, 2)),
                                kl_bound=0.1, label="x")
    back = MetricReport.from_json(rep.to_json())
    assert back == rep
    assert rep.w2 is not None and rep.mmd is not None
    csv_text = reports_to_csv([rep, back])
    lines = csv_text.strip().splitlines()
    assert lines[0].startswith("label,terminal_ess") and len(lines) == 3


def test_report_validation():
    with pytest.raises(ValueError):
        MetricReport([], 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        MetricReport([], 0.5, float("nan"), 0.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-20, 20)))
def test_deterministic_resample_counts(lw):
    pts = np.arange(lw.size)
    out = deterministic_resample(pts, lw)
    assert out.size == lw.size
    counts = np.bincount(out, minlength=lw.size)
    w = np.exp(lw - lw.max())
    assert np.all(np.abs(counts - lw.size * w / w.sum()) < 1 + 1e-9)
