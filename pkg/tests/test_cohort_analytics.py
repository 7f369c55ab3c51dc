import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from digisib.cohort_analytics import (RIDGE, feature_cloud, fit_moments, frechet_distance,
                                      frechet_from_moments, heatmap_diff, occupancy_heatmap,
                                      precision_recall)
from digisib.core import LabelMap, TissueId as T


def _brute_pr(real, synth, k):
    def dist(a, b):
        return float(np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b))))

    def radius(cloud, i):
        ds = sorted(dist(cloud[i], cloud[j]) for j in range(len(cloud)) if j != i)
        return ds[k - 1]

    def cov(points, manifold):
        r = [radius(manifold, i) for i in range(len(manifold))]
        hit = [any(dist(p, m) <= r[i] for i, m in enumerate(manifold)) for p in points]
        return sum(hit) / len(points)

    return cov(synth, real), cov(real, synth)


def test_precision_recall_matches_brute_force():
    gen = np.random.default_rng(4)
    for _ in range(20):
        n, m, d = gen.integers(6, 21), gen.integers(6, 21), gen.integers(1, 5)
        real, synth = gen.normal(size=(n, d)), gen.normal(0.5, 1.3, size=(m, d))
        k = int(gen.integers(1, 4))
        assert precision_recall(real, synth, k) == _brute_pr(real.tolist(), synth.tolist(), k)


def test_precision_recall_identical_clouds():
    x = np.random.default_rng(0).normal(size=(30, 3))
    assert precision_recall(x, x) == (1.0, 1.0)


def test_precision_recall_too_small():
    with pytest.raises(ValueError):
        precision_recall(np.zeros((3, 2)), np.zeros((10, 2)), k=3)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(0.1, 4), st.floats(-5, 5), st.floats(0.1, 4))
def test_frechet_1d_closed_form(ma, sa, mb, sb):
    got = frechet_from_moments(np.array([ma]), np.array([[sa * sa]]), np.array([mb]), np.array([[sb * sb]]))
    assert got == pytest.approx((ma - mb) ** 2 + (sa - sb) ** 2, rel=1e-9, abs=1e-9)


def test_frechet_diagonal_closed_form():
    gen = np.random.default_rng(1)
    for _ in range(10):
        d = 12
        mu_a, mu_b = gen.normal(size=d), gen.normal(size=d)
        va, vb = gen.uniform(0.1, 3, d), gen.uniform(0.1, 3, d)
        want = np.sum((mu_a - mu_b) ** 2) + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2)
        got = frechet_from_moments(mu_a, np.diag(va), mu_b, np.diag(vb))
        assert got == pytest.approx(want, rel=1e-9)


def test_frechet_from_samples_uses_ridged_moments():
    gen = np.random.default_rng(2)
    a, b = gen.normal(size=(50, 1)), gen.normal(1, 2, size=(60, 1))
    va, vb = a.var(ddof=1) + RIDGE, b.var(ddof=1) + RIDGE
    want = (a.mean() - b.mean()) ** 2 + (np.sqrt(va) - np.sqrt(vb)) ** 2
    assert frechet_distance(a, b) == pytest.approx(want, rel=1e-9)
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-12)


def test_frechet_needs_enough_members():
    with pytest.raises(ValueError):
        fit_moments(np.zeros((5, 12)))


def test_feature_cloud_uses_reference_constants():
    ref = np.array([[0.0, 1.0], [2.0, 1.0]])
    fc = feature_cloud(np.array([[1.0, 3.0]]), ref)
    np.testing.assert_allclose(fc.rows, [[0.0, 2.0]])


def _map(vals):
    return LabelMap(np.asarray(vals, np.uint8).reshape(2, 1, 1), 1.0)


def test_heatmap_mean_and_diff():
    a = occupancy_heatmap([_map([T.LV, 0]), _map([T.RV, 0])])
    b = occupancy_heatmap([_map([T.LV, T.LV])])
    assert a.P[T.LV, 0, 0, 0] == 0.5 and a.P[T.RV, 0, 0, 0] == 0.5
    np.testing.assert_allclose(a.P.sum(0), 1.0)
    diff, mask = heatmap_diff(a, b)
    assert diff[0, 0, 0] == 0.0
    assert mask[1, 0, 0]  # a has no foreground there
    per, _ = heatmap_diff(a, b, per_channel=True)
    assert per[T.LV, 0, 0, 0] == -0.5


def test_heatmap_errors():
    with pytest.raises(ValueError):
        occupancy_heatmap([])
    a = occupancy_heatmap([_map([1, 0])])
    b = occupancy_heatmap([LabelMap(np.zeros((1, 1, 1), np.uint8), 1.0)])
    with pytest.raises(ValueError):
        heatmap_diff(a, b)
