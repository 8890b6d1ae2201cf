import itertools

import numpy as np
import pytest

from qnetld.local import (closed_form_table, facet_drift_gap, lln_drift, localize, tilt_array,
                          tilt_dict)
from qnetld.skorokhod import sp_for_jackson


def test_localize_ps_rates(fx):
    m = localize(fx["P2"], [0])
    assert m.rate((0,), (0, -1)) == pytest.approx(3.0, abs=1e-15)
    assert m.rate((), (0, -1)) == pytest.approx(1.5, abs=1e-15)


def test_localize_origin_facet_jackson(fx):
    m = localize(fx["J2"], [0, 1])
    for v in m.V:
        if any(x < 0 for x in v):
            assert m.rate((0, 1), v) == 0.0
        else:
            assert m.rate((0, 1), v) == pytest.approx(0.3, abs=1e-15)


def test_localize_empty_K(fx):
    for spec in fx.values():
        m = localize(spec, ())
        assert m.table.shape == (1, len(m.V))
        np.testing.assert_array_equal(m.interior_rates(), closed_form_table(spec, (), m.V)[0])


def test_table_readonly_and_cached(fx):
    m = localize(fx["J2"], [1, 0])
    assert m is localize(fx["J2"], (0, 1))
    with pytest.raises(ValueError):
        m.table[0, 0] = 1.0


def test_rejects_large_K():
    from qnetld.model import processor_sharing
    spec = processor_sharing([1] * 13, [2] * 13, [1 / 13] * 13)
    with pytest.raises(ValueError):
        localize(spec, range(13))


def test_rates_vanish_only_at_boundaries(fx):
    for spec in fx.values():
        m = localize(spec, range(spec.N))
        dead = m.table[0] == 0
        assert np.all(m.table[:, dead] == 0)
        assert m.table.max() <= max(max(spec.a), max(spec.sigma)) + 1e-12


def test_nesting_consistency(fx):
    for name in ("J2", "J3", "P2"):
        spec = fx[name]
        full = localize(spec, range(spec.N))
        for r in range(spec.N):
            for Kp in itertools.combinations(range(spec.N), r):
                sub = localize(spec, Kp)
                for m in range(sub.n_facets):
                    I = sub.facet(m)
                    if name.startswith("J"):
                        # Jackson rates do not depend on constraints outside I
                        np.testing.assert_array_equal(sub.table[m], full.table[full.mask(I)])
                    else:
                        # processor sharing: the same facet of the full model
                        np.testing.assert_allclose(sub.table[m], full.table[full.mask(I)], rtol=1e-15)


def test_lln_drift(fx):
    np.testing.assert_allclose(lln_drift(localize(fx["J2"], ()), 1.0), [-0.2, -0.2], atol=1e-15)
    np.testing.assert_allclose(lln_drift(localize(fx["P2"], ()), 1.0), [-0.5, -0.5], atol=1e-15)
    np.testing.assert_array_equal(lln_drift(localize(fx["J3"], ()), 0.0), np.zeros(3))


def test_facet_drift_gap_examples(fx):
    m = localize(fx["J2"], [0, 1])
    np.testing.assert_array_equal(facet_drift_gap(m, (), 1.0), [0, 0])
    np.testing.assert_allclose(facet_drift_gap(m, (0,), 1.0), [1.0, -0.5], atol=1e-15)
    mp = localize(fx["P2"], [0, 1])
    np.testing.assert_allclose(facet_drift_gap(mp, (0, 1), 1.0), [1.5, 1.5], atol=1e-15)


@pytest.mark.parametrize("name", ["J2", "J3"])
def test_jackson_gap_is_sum_of_directions(fx, rng, name):
    spec = fx[name]
    m = localize(spec, range(spec.N))
    for _ in range(20):
        c = rng.uniform(0.2, 3.0, size=len(m.V))
        sp = sp_for_jackson(spec, tilt_dict(m.V, c))
        # unnormalized d_i is the gap of the single facet {i}
        raw = [facet_drift_gap(m, (i,), c) for i in range(spec.N)]
        for i in range(spec.N):
            np.testing.assert_allclose(raw[i] / np.linalg.norm(raw[i]), sp.dirs[i], atol=1e-14)
        for mask in range(1, m.n_facets):
            I = m.facet(mask)
            np.testing.assert_allclose(facet_drift_gap(m, I, c), sum(raw[i] for i in I),
                                       atol=1e-13)


def test_tilt_array_forms(fx):
    V = localize(fx["J1"], ()).V
    np.testing.assert_array_equal(tilt_array(V, None), [1, 1])
    np.testing.assert_array_equal(tilt_array(V, 2.0), [2, 2])
    np.testing.assert_array_equal(tilt_array(V, {(-1,): 2.0, (1,): 0.5}), [2, 0.5])
    with pytest.raises(ValueError):
        tilt_array(V, {(1,): 0.5})
    with pytest.raises(ValueError):
        tilt_array(V, [1, 2, 3])
