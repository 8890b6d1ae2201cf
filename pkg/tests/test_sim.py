import math

import numpy as np
import pytest

from qnetld.local import localize, tilt_dict
from qnetld.rates import local_rate
from qnetld.sim import (Batch, SimConfig, empirical_occupancy, estimate_tube_prob, is_estimate,
                        lln_check, occupancy_by_facet, occupancy_stderr, rng_for, run_batch,
                        simulate_path, tube_probability_exact)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(n=0, reps=10)
    with pytest.raises(ValueError):
        SimConfig(n=10, reps=0)
    with pytest.raises(ValueError):
        SimConfig(n=10, reps=10, epsilon=0)
    assert SimConfig(n=10.0, reps=5).n == 10


def test_streams_are_independent_of_order():
    a = rng_for(3, 7).random(5)
    rng_for(3, 6).random(100)
    np.testing.assert_array_equal(a, rng_for(3, 7).random(5))
    assert not np.array_equal(a, rng_for(3, 8).random(5))
    assert not np.array_equal(a, rng_for(4, 7).random(5))


def test_reproducible_across_threads(fx):
    m = localize(fx["J2"], [0, 1])
    cfg = SimConfig(n=20, reps=200, seed=11, epsilon=0.3)
    b1 = run_batch(m, cfg, threads=1)
    b4 = run_batch(m, cfg, threads=4)
    for f in ("log_weight", "inside", "occupation", "terminal"):
        np.testing.assert_array_equal(getattr(b1, f), getattr(b4, f))
    e1 = estimate_tube_prob(m, cfg, threads=1)
    e3 = estimate_tube_prob(m, cfg, threads=3)
    assert e1.p_hat == e3.p_hat and e1.std_error == e3.std_error


def test_batch_matches_single_paths(fx):
    m = localize(fx["J1"], [0])
    cfg = SimConfig(n=15, reps=5, seed=2, epsilon=0.5)
    b = run_batch(m, cfg)
    for rep in range(5):
        s = simulate_path(m, cfg, rep)
        np.testing.assert_array_equal(s.terminal, b.terminal[rep])
        assert s.inside == b.inside[rep]
        assert s.log_weight == b.log_weight[rep]


def test_path_structure(fx):
    m = localize(fx["J2"], [0, 1])
    s = simulate_path(m, SimConfig(n=30, reps=1, seed=0, epsilon=1.0), 0)
    assert np.all(np.diff(s.times) > 0) and s.times[-1] < 1.0
    assert np.all(s.states >= 0)
    steps = np.diff(np.vstack([[0, 0], s.states]), axis=0)
    allowed = {tuple(v) for v in m.V}
    assert all(tuple(d) in allowed for d in steps)
    assert s.occupation.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(s.terminal, s.states[-1] / 30)


def test_unconstrained_coordinates_go_negative(fx):
    m = localize(fx["J1s"], ())
    b = run_batch(m, SimConfig(n=20, reps=200, seed=1, epsilon=5.0))
    assert np.any(b.terminal < 0)
    assert b.occupation.shape == (200, 1)


def test_zero_rate_directions_never_sampled(fx):
    # in PS at the facet {0} class 0 cannot depart
    m = localize(fx["P2"], [0, 1])
    for rep in range(20):
        s = simulate_path(m, SimConfig(n=10, reps=1, seed=5, epsilon=5.0), rep)
        prev = np.zeros(2, dtype=int)
        for x in s.states:
            d = x - prev
            for i in range(2):
                if prev[i] == 0:
                    assert d[i] >= 0
            prev = x


def test_occupation_sums_to_horizon(fx):
    m = localize(fx["P2"], [0, 1])
    cfg = SimConfig(n=10, reps=50, seed=0, epsilon=5.0, horizon=2.5)
    b = run_batch(m, cfg)
    np.testing.assert_allclose(b.occupation.sum(axis=1), 2.5, rtol=1e-12)
    occ = empirical_occupancy(b)
    assert occ.sum() == pytest.approx(1.0, abs=1e-12)
    assert set(occupancy_by_facet(m, b)) == {(), (0,), (1,), (0, 1)}
    assert np.all(occupancy_stderr(b) >= 0)


def test_occupancy_from_samples_matches_batch(fx):
    m = localize(fx["J2"], [0, 1])
    cfg = SimConfig(n=10, reps=10, seed=3, epsilon=5.0)
    samples = [simulate_path(m, cfg, r) for r in range(10)]
    np.testing.assert_allclose(empirical_occupancy(samples), empirical_occupancy(run_batch(m, cfg)),
                               rtol=1e-12)
    with pytest.raises(ValueError):
        empirical_occupancy([])


def test_mm1_occupancy_matches_solver(fx):
    # at beta = 0 the optimal tilt makes the queue critical: rho_0 = c- r- - c+ r+ balance
    m = localize(fx["J1"], [0])
    sol = local_rate(fx["J1"], [0], [0.0])
    cfg = SimConfig(n=200, reps=100, seed=0, epsilon=5.0, control=sol.c)
    occ = empirical_occupancy(run_batch(m, cfg))
    assert occ[1] == pytest.approx(sol.rho[(0,)], abs=0.05)


def test_unit_control_weight_identity(fx):
    m = localize(fx["J2"], [0, 1])
    cfg = SimConfig(n=10, reps=400, seed=9, epsilon=0.4, beta=[0.1, 0.0], control=1.0)
    b = run_batch(m, cfg)
    assert np.all(b.log_weight == 0)
    naive = estimate_tube_prob(m, cfg)
    imp = is_estimate(m, cfg)
    assert imp.p_hat == pytest.approx(naive.p_hat, rel=1e-12)
    assert imp.std_error == pytest.approx(naive.std_error, rel=1e-9)


def test_naive_rejects_tilt(fx):
    m = localize(fx["J1"], [0])
    with pytest.raises(ValueError):
        estimate_tube_prob(m, SimConfig(n=10, reps=10, control=2.0))


def test_naive_flags_empty_tube(fx):
    m = localize(fx["J1"], [0])
    e = estimate_tube_prob(m, SimConfig(n=200, reps=200, seed=0, epsilon=0.05, beta=[0.8]))
    assert e.p_hat == 0 and e.flagged and math.isinf(e.q_hat)
    assert e.to_dict()["qHat"] is None


def test_q_hat_has_no_negative_zero(fx):
    m = localize(fx["J1s"], ())
    e = estimate_tube_prob(m, SimConfig(n=5, reps=20, seed=0, epsilon=50.0))
    assert e.p_hat == 1 and str(e.q_hat) == "0.0"


@pytest.mark.parametrize("K,beta", [((0,), 0.0), ((0,), 0.3), ((), -0.2)])
def test_exact_tube_probability_naive(fx, K, beta):
    m = localize(fx["J1"], K)
    n, eps = 10, 0.3
    exact = tube_probability_exact(m, n, beta, eps)
    e = estimate_tube_prob(m, SimConfig(n=n, reps=20000, seed=4, epsilon=eps, beta=[beta]))
    assert abs(e.p_hat - exact) <= 4 * e.std_error + 1e-3


@pytest.mark.parametrize("K,beta", [((0,), 0.0), ((), -0.2)])
def test_importance_sampling_unbiased(fx, K, beta):
    m = localize(fx["J1"], K)
    n, eps = 2, 0.6
    exact = tube_probability_exact(m, n, beta, eps)
    ctl = tilt_dict(m.V, [1.7, 0.6])
    e = is_estimate(m, SimConfig(n=n, reps=40000, seed=8, epsilon=eps, beta=[beta], control=ctl))
    assert abs(e.p_hat - exact) <= 4 * e.std_error


def test_exact_oracle_tilt_invariant_when_unit(fx):
    m = localize(fx["J1"], [0])
    assert tube_probability_exact(m, 8, 0.1, 0.4, control=1.0) == \
        tube_probability_exact(m, 8, 0.1, 0.4)
    with pytest.raises(ValueError):
        tube_probability_exact(localize(fx["J2"], ()), 8, 0.0, 0.4)


def test_exact_oracle_decays_like_rate(fx):
    # -log p / n approaches the local rate at beta = 0 from the solver
    m = localize(fx["J1"], [0])
    L = local_rate(fx["J1"], [0], [0.0]).value
    q = [-math.log(tube_probability_exact(m, n, 0.0, 0.1)) / n for n in (100, 400)]
    assert abs(q[1] - L) < abs(q[0] - L)


def test_lln_terminal_bias_shrinks(fx):
    # reflection at zero pushes the terminal mean up by O(1/n)
    m = localize(fx["J2"], [0, 1])
    rep = lln_check(m, 1.0, [0, 0], [10, 40], reps=1500, epsilon=0.25)
    assert rep.monotone
    assert np.all(rep.mean_terminal[1] < rep.mean_terminal[0])
    rows = list(rep.rows())
    assert rows[0]["n"] == 10 and len(rows[0]["mean_terminal"]) == 2


def test_batch_type():
    b = Batch(np.zeros(2), np.ones(2, dtype=bool), np.ones((2, 1)), np.zeros((2, 1)))
    np.testing.assert_array_equal(empirical_occupancy(b), [1.0])
