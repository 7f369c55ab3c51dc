import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from digisib.anatomy_metrics import (CHECK_NAMES, adjacent, check_topology, cohort_violation_rate,
                                     component_sizes, morph_features)
from digisib.core import LabelMap, TissueId as T
from digisib.phantom import split_component

OFF26 = [d for d in itertools.product((-1, 0, 1), repeat=3) if any(d)]
OFF6 = [d for d in OFF26 if sum(map(abs, d)) == 1]


def _uf_components(mask, offsets):
    """Union-find over voxel indices; returns sorted component sizes."""
    idx = {tuple(v): i for i, v in enumerate(np.argwhere(mask))}
    parent = list(range(len(idx)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for v, i in idx.items():
        for d in offsets:
            j = idx.get((v[0] + d[0], v[1] + d[1], v[2] + d[2]))
            if j is not None:
                parent[find(i)] = find(j)
    roots = [find(i) for i in range(len(parent))]
    return sorted(np.unique(roots, return_counts=True)[1].tolist(), reverse=True)


def _brute_adjacent(lab, a, b):
    for v in np.argwhere(lab == a):
        for d in OFF6:
            w = v + d
            if np.all(w >= 0) and np.all(w < lab.shape) and lab[tuple(w)] == b:
                return True
    return False


def test_components_and_adjacency_match_oracle():
    gen = np.random.default_rng(0)
    for _ in range(200):
        shape = tuple(gen.integers(2, 9, size=3))
        lab = gen.integers(0, 7, size=shape).astype(np.uint8)
        t = int(gen.integers(1, 7))
        assert component_sizes(lab == t, 26) == _uf_components(lab == t, OFF26)
        assert component_sizes(lab == t, 6) == _uf_components(lab == t, OFF6)
        a, b = gen.choice(np.arange(1, 7), 2, replace=False)
        assert adjacent(lab, a, b) == _brute_adjacent(lab, a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_adjacency_is_symmetric(s):
    gen = np.random.default_rng(s)
    lab = gen.integers(0, 4, size=(5, 5, 5)).astype(np.uint8)
    assert adjacent(lab, 1, 2) == adjacent(lab, 2, 1)


def _ellipsoid_map(axes_vox, n=40):
    c = (n - 1) / 2
    x, y, z = np.meshgrid(*(np.arange(n) - c,) * 3, indexing="ij")
    inside = (x / axes_vox[0]) ** 2 + (y / axes_vox[1]) ** 2 + (z / axes_vox[2]) ** 2 <= 1
    lab = np.zeros((n, n, n), np.uint8)
    lab[inside] = T.LV
    return LabelMap(lab, 1.4)


@pytest.mark.parametrize("axes", [(6, 6, 6), (6, 7, 8), (8, 6, 7), (10, 8, 6), (12, 9, 7),
                                  (7, 7, 12), (15, 10, 8), (9, 13, 6), (11, 11, 16), (6, 14, 10)])
def test_ellipsoid_volume_and_axes(axes):
    m = _ellipsoid_map(axes)
    f = morph_features(m)
    a = np.asarray(axes, float) * 1.4
    vol = 4 / 3 * np.pi * a.prod() / 1000.0
    assert abs(f[0] - vol) <= 0.05 * vol
    assert abs(f[1] - 2 * a.max()) <= 0.05 * 2 * a.max()
    assert abs(f[2] - 2 * a.min()) <= 0.05 * 2 * a.min()


def test_single_voxel_and_absent_tissue():
    lab = np.zeros((4, 4, 4), np.uint8)
    lab[1, 1, 1] = T.RV
    f = morph_features(LabelMap(lab, 2.0))
    assert f[3] == pytest.approx(0.008)
    assert f[4] == 0 and f[5] == 0
    assert np.all(f[[0, 1, 2, 6, 7, 8, 9, 10, 11]] == 0)


def test_report_names_and_order(phantom):
    rep = check_topology(phantom)
    assert list(rep.checks) == list(CHECK_NAMES)
    assert len(CHECK_NAMES) == 12


def test_violation_rate_arithmetic(phantom):
    bad = split_component(phantom)
    members = [phantom, bad, phantom, bad]
    assert cohort_violation_rate(members) == pytest.approx(100 * 2 / 48)
    assert cohort_violation_rate(members, per="map") == pytest.approx(50.0)
    with pytest.raises(ValueError):
        cohort_violation_rate([])
    with pytest.raises(ValueError):
        cohort_violation_rate(members, per="voxel")
