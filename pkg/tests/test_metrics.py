"""Metric identities and hand-computed cases."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riaftbart.metrics import (GPS_SUBCLASSES, gps_subclass, metric_bias_rmse_by_gps,
                               metric_concordance, metric_pehe, metric_selection)


def test_pehe_identities():
    t = np.array([0.1, -2.0, 3.5])
    assert metric_pehe(t, t) == 0.0
    assert metric_pehe(t + 1, t) == pytest.approx(1.0)
    assert metric_pehe([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))
    with pytest.raises(ValueError):
        metric_pehe([1, 2], [1, 2, 3])


def test_selection_hand_cases():
    useful = [f"x{i}" for i in range(1, 9)]
    noise = [f"x{i}" for i in range(9, 29)]
    m = metric_selection(useful + ["x9", "x10"], useful, noise)
    assert (m["tp"], m["fp"], m["fn"]) == (8, 2, 0)
    assert m["precision"] == 0.8 and m["recall"] == 1.0
    assert m["f1"] == pytest.approx(16 / 18, abs=0) and round(m["f1"], 3) == 0.889
    assert m["type1"] == 2 / 20
    perfect = metric_selection(useful, useful, noise)
    assert (perfect["precision"], perfect["recall"], perfect["f1"], perfect["type1"]) == (1, 1, 1, 0)
    empty = metric_selection([], useful, noise)
    assert empty["precision"] is None and empty["f1"] == 0.0 and empty["recall"] == 0.0


def _brute_concordance(p, y, d):
    num = den = 0.0
    for i, j in itertools.permutations(range(len(y)), 2):
        if y[i] < y[j] and d[i] == 1:
            den += 1
            num += 1.0 if p[i] < p[j] else 0.5 if p[i] == p[j] else 0.0
    return num / den


def test_concordance_identities(rng):
    y = rng.exponential(size=300)
    d = np.ones(300, int)
    assert metric_concordance(y, y, d) == 1.0
    assert metric_concordance(-y, y, d) == 0.0
    assert metric_concordance(np.zeros(300), y, d) == 0.5
    g = np.random.default_rng(0)
    yb = g.exponential(size=1000)
    assert metric_concordance(g.random(1000), yb, np.ones(1000, int)) == pytest.approx(0.5, abs=0.03)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(3, 25))
def test_concordance_matches_pairwise_definition(seed, n):
    g = np.random.default_rng(seed)
    y = g.integers(1, 6, n).astype(float)  # ties in time
    d = g.integers(0, 2, n)
    d[np.argmin(y)] = 1
    p = g.integers(0, 3, n).astype(float)  # ties in prediction
    if not any(y[i] < y[j] and d[i] for i in range(n) for j in range(n)):
        return
    assert metric_concordance(p, y, d) == pytest.approx(_brute_concordance(p, y, d), abs=1e-12)


def test_concordance_without_pairs_raises():
    with pytest.raises(ValueError):
        metric_concordance([0.1, 0.2], [1.0, 2.0], [0, 0])


def test_gps_table_shape_and_first_match():
    assert len(GPS_SUBCLASSES) == 40
    gps = np.array([[0.05, 0.3], [0.15, 0.3], [0.45, 0.45], [0.95, 0.7]])
    np.testing.assert_array_equal(gps_subclass(gps), [1, 3, 14, 40])


@settings(max_examples=200, deadline=None)
@given(g1=st.floats(1e-6, 1.0), g2=st.floats(1e-6, 1.0))
def test_gps_subclass_is_single_valued(g1, g2):
    lab = gps_subclass(np.array([[g1, g2]]))[0]
    hits = [s for s, ((a1, b1), (a2, b2)) in enumerate(GPS_SUBCLASSES, 1)
            if a1 < g1 <= b1 and a2 < g2 <= b2]
    assert lab == (hits[0] if hits else 0)


def test_bias_rmse_by_gps(rng):
    gps = rng.dirichlet([2, 2, 1], size=500)
    truth = rng.normal(1.0, 0.3, (3, 500))
    exact = metric_bias_rmse_by_gps(truth, truth, gps)
    assert len(exact) == 40
    present = [r for r in exact if r["present"]]
    assert present and all(r["bias"] == 0 and r["rmse"] == 0 for r in present)
    assert sum(r["n"] for r in present) == pytest.approx(np.sum(gps_subclass(gps) > 0))
    shifted = metric_bias_rmse_by_gps(truth + 0.1, truth, gps)
    for r in shifted:
        if r["present"]:
            assert r["rmse"] == pytest.approx(0.1)
            mt = np.mean([truth[k, gps_subclass(gps) == r["subclass"]].mean() for k in range(3)])
            assert r["bias"] == pytest.approx(0.1 / abs(mt))
