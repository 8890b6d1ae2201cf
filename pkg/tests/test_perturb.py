import numpy as np
import pytest

from qnetld.local import localize
from qnetld.perturb import (chain_counts, check_condition3_uniqueness, closed_chains,
                            perturb_positive, solution_from)
from qnetld.rates import local_rate, rho_from_tau

KAPPAS = (1e-1, 1e-2, 1e-3, 1e-4)


def j2_zero_transfer(fx):
    # origin local model, c = 1 except no transfers 1 -> 2; balance needs tau = (0.9, 0.3)
    m = localize(fx["J2"], [0, 1])
    c = {v: 1.0 for v in m.V}
    c[(-1, 1)] = 0.0
    return m, solution_from(m, rho_from_tau([0.9, 0.3], m.K), c)


def test_constructed_solution_balances(fx):
    m, s = j2_zero_transfer(fx)
    np.testing.assert_allclose(s.beta, [0, 0], atol=1e-15)
    assert s.residual() <= 1e-15


def test_jackson_perturbation_converges(fx):
    m, s = j2_zero_transfer(fx)
    prev = np.inf
    for k in KAPPAS:
        out = perturb_positive(m, s, k)
        assert out.residual() <= 1e-9
        assert np.all(out.c_array() > 0)
        np.testing.assert_allclose(out.beta, s.beta)
        gap = np.abs(out.c_array() - s.c_array()).max()
        assert gap < prev
        prev = gap
    assert prev < 1e-2


def test_jackson_idle_node(fx):
    # node 1 never busy: its tilts are free and must stay bounded as kappa shrinks
    m = localize(fx["J2"], [0, 1])
    s = solution_from(m, rho_from_tau([0.0, 0.3], m.K), 1.0)
    outs = [perturb_positive(m, s, k) for k in KAPPAS]
    for out in outs:
        assert out.residual() <= 1e-9 and np.all(out.c_array() > 0)
        assert out.c_array().max() < 100
    idle = [j for j, v in enumerate(m.V) if v[0] == -1]
    np.testing.assert_allclose(outs[-1].c_array()[idle], outs[-2].c_array()[idle])


def test_positive_input_converges(fx):
    m = localize(fx["J2u"], [0, 1])
    s = local_rate(fx["J2u"], [0, 1], [0, 0])
    out = perturb_positive(m, s, 1e-8)
    np.testing.assert_allclose(out.c_array(), s.c_array(), atol=1e-6)


def test_closed_chains_sum_to_zero(fx):
    for name in ("J2", "J3", "J1"):
        for ch in closed_chains(fx[name]):
            assert np.all(np.sum(ch, axis=0) == 0)
        m = localize(fx[name], ())
        assert np.all(chain_counts(m) >= 1)


def test_ps_perturbation(fx):
    m = localize(fx["P2"], [0, 1])
    c = {v: 1.0 for v in m.V}
    c[(1, 0)] = 0.0
    s = solution_from(m, {(0,): 0.5, (1,): 0.5}, c)
    assert s.rho[()] == 0.0
    prev = np.inf
    for k in KAPPAS:
        out = perturb_positive(m, s, k)
        assert out.rho[()] == pytest.approx(k, abs=1e-15)
        assert out.residual() <= 1e-9 and np.all(out.c_array() > 0)
        gap = np.abs(out.c_array() - s.c_array()).max()
        assert gap < prev
        prev = gap
    assert prev < 1e-3


def test_ps_rejects_large_kappa(fx):
    m = localize(fx["P2"], [0])
    s = solution_from(m, {(0,): 1.0}, 1.0)
    with pytest.raises(ValueError):
        perturb_positive(m, s, 1.5)
    with pytest.raises(ValueError):
        perturb_positive(m, s, 0.0)


def test_rejects_unbalanced_input(fx):
    m, s = j2_zero_transfer(fx)
    s.beta = np.array([0.5, 0.0])
    with pytest.raises(ValueError):
        perturb_positive(m, s, 0.01)


def test_uniqueness_examples(fx):
    r = check_condition3_uniqueness(fx["J2"], [0, 1], 1.0, [0, 0], [0, 0])
    assert r["deviation"] == 0.0
    np.testing.assert_allclose(r["tau"], [0.6, 0.6], atol=1e-15)
    r = check_condition3_uniqueness(fx["P2"], [0, 1], 1.0, [0, 0], [0, 0])
    assert r["deviation"] == 0.0
    np.testing.assert_allclose(r["tau"], [1.0, 1.0])


def test_uniqueness_lipschitz(fx, rng):
    for name in ("J2", "J3", "P2", "P2u"):
        spec = fx[name]
        m = localize(spec, ())
        for _ in range(20):
            c = rng.uniform(0.3, 3, size=len(m.V))
            b1, b2 = rng.uniform(-1, 1, size=(2, spec.N))
            r = check_condition3_uniqueness(spec, (), c, b1, b2)
            assert r["deviation"] <= r["bound"] * (1 + 1e-9)


def test_uniqueness_matches_solver(fx):
    # the busy fractions recovered from the optimal tilt are the solver's
    s = local_rate(fx["J2u"], [0, 1], [0, 0])
    r = check_condition3_uniqueness(fx["J2u"], [0, 1], s.c, [0, 0], [0, 0])
    np.testing.assert_allclose(r["tau"], s.tau, atol=1e-8)
