import numpy as np
import pytest

from digisib.anatomy_metrics import check_topology, morph_features
from digisib.core import RngStream, TissueId as T
from digisib.phantom import (DEFECTS, PopulationSpec, generate_cohort, in_envelope, rasterize,
                             sample_params)


def test_canonical_phantom_passes_all_checks(phantom):
    rep = check_topology(phantom)
    assert rep.violation_count == 0, rep.failed


def test_draws_stay_in_envelope_and_valid():
    spec = PopulationSpec()
    for k in range(40):
        p = sample_params(spec, RngStream(7, k))
        assert in_envelope(p, spec.dims, spec.voxel_size)
        rep = check_topology(rasterize(p, spec.dims, spec.voxel_size))
        assert rep.violation_count == 0, (k, rep.failed)


@pytest.mark.parametrize("w", [0.0, 1.0])
def test_mixing_weight_extremes(w):
    spec = PopulationSpec(rare_weight=w)
    _, _, modes = generate_cohort(spec, 15, 3)
    assert all(m == bool(w) for m in modes)


def test_rare_mode_has_larger_rv():
    common = generate_cohort(PopulationSpec(rare_weight=0.0), 20, 1)[0]
    rare = generate_cohort(PopulationSpec(rare_weight=1.0), 20, 1)[0]
    rv = lambda c: np.mean([morph_features(m)[3] for m in c])  # noqa: E731
    assert rv(rare) > 1.3 * rv(common)


def test_cohort_is_reproducible():
    a = generate_cohort(PopulationSpec(), 5, 11)[0]
    b = generate_cohort(PopulationSpec(), 5, 11)[0]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.labels, y.labels)


def test_lv_volume_close_to_ellipsoid_median():
    # median LV semi-axes (8.4, 8.4, 10.5) mm; myocardium does not overwrite LV
    spec = PopulationSpec(scale={k: 0.0 for k in PopulationSpec().scale}, jitter_mm=0.0)
    p = sample_params(spec, RngStream(0, 0))
    vol = morph_features(rasterize(p))[0]
    analytic = 4 / 3 * np.pi * 8.4 * 8.4 * 10.5 / 1000.0
    assert abs(vol - analytic) <= 0.05 * analytic


@pytest.mark.parametrize("name", sorted(DEFECTS))
def test_defects_trip_exactly_their_check(name):
    fn, check = DEFECTS[name]
    spec = PopulationSpec()
    for k in range(5):
        m = rasterize(sample_params(spec, RngStream(21, k)))
        assert check_topology(fn(m)).failed == [check]


def test_invalid_population_rejected():
    with pytest.raises(ValueError):
        PopulationSpec(rare_weight=1.5)
    with pytest.raises(ValueError):
        PopulationSpec(location={"lv_axes": [1, 1, 1]})
