import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qnetld.model import (check_communication, facet_index, intensity, jackson, jump_directions,
                          load_spec, processor_sharing, spec_from_dict, spec_to_dict, validate,
                          SpecError, FIXTURES)


def test_ps_directions(fx):
    assert jump_directions(fx["P2"]) == [(-1, 0), (0, -1), (0, 1), (1, 0)]


def test_jackson_directions(fx):
    V = jump_directions(fx["J2"])
    assert len(V) == 6
    assert set(V) == {(1, 0), (0, 1), (-1, 0), (0, -1), (-1, 1), (1, -1)}
    assert V == sorted(V)


def test_jackson_directions_drop_zero_rates():
    spec = jackson([1, 0], [1, 1], [[0.5, 0, 0.5], [0, 1, 0]])
    V = jump_directions(spec)
    assert (0, 1) not in V and (0, -1) not in V
    assert (1, 0) in V and (-1, 0) in V


def test_intensity_examples(fx):
    assert intensity(fx["P2"], [0, 5], (0, -1)) == pytest.approx(3.0, abs=1e-15)
    assert intensity(fx["P2"], [4, 5], (0, -1)) == pytest.approx(1.5, abs=1e-15)
    assert intensity(fx["J2"], [0, 1], (-1, 1)) == 0.0


def test_intensity_rejects_negative_state(fx):
    with pytest.raises(ValueError):
        intensity(fx["J2"], [-1, 0], (1, 0))


def test_intensity_zero_when_leaving_orthant(fx):
    assert intensity(fx["P2"], [0, 0], (-1, 0)) == 0.0
    assert intensity(fx["J2"], [0, 3], (-1, 1)) == 0.0


def test_ps_all_empty_has_no_service(fx):
    assert intensity(fx["P2"], [0, 0], (0, -1)) == 0.0


def test_facet_index():
    assert facet_index([0.0, 2.5, 0.0], [0, 1, 2]) == (0, 2)
    assert facet_index([1.0, 2.0]) == ()
    assert facet_index(np.zeros(3, dtype=int)) == (0, 1, 2)
    assert facet_index([1e-13, 1.0]) == (0,)
    assert facet_index(np.array([0, 1]), [1]) == ()


def test_validate_fixtures(fx):
    for spec in fx.values():
        assert validate(spec) == []


def test_validate_ps_f():
    assert "f does not sum to 1" in validate(processor_sharing([1, 1], [3, 3], [0.6, 0.6]))


def test_validate_no_exit():
    spec = jackson([1, 1], [1, 1], [[0, 0, 1], [0, 1, 0]])
    assert "no exit node" in validate(spec)


def test_validate_reducible():
    spec = jackson([1, 1], [1, 1], [[1, 0, 0], [0.5, 0.5, 0]])
    assert any("irreducibility" in v for v in validate(spec))


def test_validate_ps_zero_arrival_rejected():
    assert validate(processor_sharing([1, 0], [3, 3], [0.5, 0.5]))


def test_validate_rows():
    spec = jackson([1], [1], [[0.5, 0.0]])
    assert any("row 0" in v for v in validate(spec))


def test_communication_examples(fx):
    c = check_communication(fx["P2"], [2, 0], [0, 3])
    assert c.reachable and c.length == 5
    c = check_communication(fx["J2"], [1, 1], [1, 1])
    assert c.reachable and c.length == 0
    c = check_communication(fx["J2"], [1, 0], [0, 1])
    assert c.reachable and c.length <= 6


@pytest.mark.parametrize("name", ["J2", "P2", "J2u", "P2u"])
def test_communication_box(fx, name):
    spec = fx[name]
    for x in itertools.product(range(6), repeat=2):
        for y in itertools.product(range(6), repeat=2):
            res = check_communication(spec, x, y)
            assert res.reachable
            assert res.length <= 3 * sum(abs(a - b) for a, b in zip(x, y))


def test_communication_three_nodes(fx):
    spec = fx["J3"]
    for x in itertools.product(range(3), repeat=3):
        for y in itertools.product(range(3), repeat=3):
            res = check_communication(spec, x, y)
            assert res.reachable
            assert res.length <= 4 * sum(abs(a - b) for a, b in zip(x, y))


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(["J2", "J3", "P2", "P2u"]), st.lists(st.integers(0, 6), min_size=3, max_size=3),
       st.integers(0, 64))
def test_rates_constant_on_facets(name, levels, seed):
    from qnetld.model import load_fixture
    spec = load_fixture(name)
    x = np.array(levels[:spec.N])
    r = np.random.default_rng(seed)
    # another state with the same zero pattern
    y = np.where(x == 0, 0, r.integers(1, 50, size=spec.N))
    for v in jump_directions(spec):
        if np.all(x + v >= 0) and np.all(y + v >= 0):
            assert intensity(spec, x, v) == intensity(spec, y, v)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(["J2", "J3", "P2"]), st.lists(st.integers(1, 20), min_size=3, max_size=3))
def test_radial_homogeneity(name, levels):
    from qnetld.model import load_fixture
    spec = load_fixture(name)
    x = np.array(levels[:spec.N])
    for v in jump_directions(spec):
        assert intensity(spec, x, v) == intensity(spec, 2 * x, v)


def test_ps_service_totals(fx):
    spec = processor_sharing([1, 1, 1], [2, 3, 5], [0.2, 0.3, 0.5])
    for x in itertools.product(range(2), repeat=3):
        busy = [i for i in range(3) if x[i] > 0]
        total = sum(intensity(spec, x, tuple(-int(k == i) for k in range(3))) for i in busy)
        f_busy = sum(spec.f[i] for i in busy)
        expect = sum(spec.sigma[i] * spec.f[i] / f_busy for i in busy) if busy else 0.0
        assert total == pytest.approx(expect, rel=1e-14)
        if len(busy) == 1:
            assert total == pytest.approx(spec.sigma[busy[0]], rel=1e-14)


def test_serialization_roundtrip(fx):
    for spec in fx.values():
        assert spec_from_dict(spec_to_dict(spec)) == spec


def test_load_spec(tmp_path, fx):
    assert load_spec("J2") == fx["J2"]
    p = tmp_path / "s.json"
    p.write_text('{"type": "processor_sharing", "a": [1], "sigma": [2], "f": [1]}')
    assert load_spec(p).N == 1
    p.write_text("{oops")
    with pytest.raises(SpecError):
        load_spec(p)
    with pytest.raises(SpecError):
        spec_from_dict({"type": "fluid"})
    assert "J3" in FIXTURES
