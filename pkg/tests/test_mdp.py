import math

import numpy as np
import pytest
from scipy.integrate import quad

from fluctlab.mdp import (EventSpec, SkeletonMap, estimate_mdp_probability, mixture_log_weights,
                          rate_function, rate_of_event, run_condition_a, run_condition_b,
                          skeleton_map)
from fluctlab.model import Control, FluxModel, NoiseModel, TorusGrid
from fluctlab.solvers import Setup, SolverConfig

G = TorusGrid(128)
RNG = np.random.default_rng(3)


@pytest.fixture(params=["endpoint", "exact"])
def smap(request):
    return SkeletonMap(G, NoiseModel(), 1.0, 1.0, 128, 0.0, request.param)


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def test_adjoint_identity(smap):
    worst = 0.0
    for _ in range(100):
        h = RNG.normal(size=smap.control_shape)
        g = RNG.normal(size=smap.trajectory_shape)
        worst = max(worst, rel(smap.inner_trajectory(smap.forward(h), g),
                               smap.inner_control(h, smap.adjoint(g))))
    assert worst <= 1e-10


def test_terminal_adjoint_identity(smap):
    for _ in range(20):
        h = RNG.normal(size=smap.control_shape)
        g = RNG.normal(size=G.n_cells)
        assert rel(smap.inner_terminal(smap.terminal(h), g),
                   smap.inner_control(h, smap.terminal_adjoint(g))) <= 1e-10


def test_viscous_adjoint_identity():
    sm = SkeletonMap(G, NoiseModel(), 1.0, 1.0, 100, 0.03, "exact")
    h = RNG.normal(size=sm.control_shape)
    g = RNG.normal(size=sm.trajectory_shape)
    assert rel(sm.inner_trajectory(sm.forward(h), g), sm.inner_control(h, sm.adjoint(g))) <= 1e-10


def test_zero_target(smap):
    res = rate_function(np.zeros(smap.trajectory_shape), smap)
    assert res.value == 0 and np.all(res.rates == 0) and res.converged


def test_recovery_of_generating_control(smap):
    M, K = smap.control_shape
    h = Control.from_functions(1.0, M, K, {3: lambda t: np.sin(2 * np.pi * t) + 0.5})
    g = smap.forward(h.rates)
    res = rate_function(g, smap)
    resim = smap.forward(res.rates)
    assert math.sqrt(smap.inner_trajectory(resim - g, resim - g)) <= 1e-6
    assert res.value <= h.energy + 1e-8
    assert rel(rate_function(2 * g, smap).value, 4 * res.value) <= 1e-6
    assert rel(rate_function(-0.5 * g, smap).value, 0.25 * res.value) <= 1e-8


def test_random_control_recovery_and_optimality(smap):
    h = RNG.normal(size=smap.control_shape)
    res = rate_function(smap.forward(h), smap)
    assert res.converged
    assert res.value == pytest.approx(smap.energy(h), rel=1e-8)  # injective map: unique control


def test_terminal_target_least_norm_below_any_feasible_control(smap):
    h = RNG.normal(size=smap.control_shape)
    g = smap.terminal(h)
    res = rate_function(g, smap, tol=1e-10)
    assert res.converged
    r = smap.terminal(res.rates) - g
    assert math.sqrt(smap.inner_terminal(r, r)) <= 1e-6
    assert res.value <= smap.energy(h) + 1e-8
    # minimizer lies in the range of the adjoint: any null-space direction costs energy
    null = h - rate_function(smap.terminal(h), smap, tol=1e-12).rates
    assert abs(smap.inner_control(res.rates, null)) <= 1e-6 * math.sqrt(
        smap.inner_control(null, null) * smap.inner_control(res.rates, res.rates)) + 1e-12


def test_out_of_range_targets_are_infeasible(smap):
    x = G.cell_centers
    # spatial mode m = 5 is outside the K = 8 noise span (which reaches m = 4)
    terminal = np.cos(2 * np.pi * 5 * x)
    res = rate_function(terminal, smap)
    assert res.infeasible and res.value == math.inf
    traj = np.zeros(smap.trajectory_shape)
    traj[1:] = terminal
    assert rate_function(traj, smap).value == math.inf
    nonzero_start = np.ones(smap.trajectory_shape)
    assert rate_function(nonzero_start, smap).value == math.inf


def test_event_rate_zero_threshold_and_homogeneity():
    sm = SkeletonMap(G, NoiseModel(), 1.0, 1.0, 128)
    assert rate_of_event(EventSpec(threshold=0.0), sm).value == 0.0
    a = rate_of_event(EventSpec(threshold=0.3), sm).value
    b = rate_of_event(EventSpec(threshold=0.6), sm).value
    assert b == pytest.approx(4 * a, rel=1e-10)
    c = rate_of_event(EventSpec("trajectory_l1l1_norm", 0.3), sm).value
    assert 0 < c < math.inf


def test_event_rate_single_mode_closed_form():
    nz = NoiseModel(n_modes=1, state_factor="additive")
    T, c = 1.0, 0.5
    sm = SkeletonMap(G, nz, 1.0, T, 128)
    er = rate_of_event(EventSpec(threshold=c), sm)
    # terminal field gamma_1 * int_0^T h ds (constant mode); cheapest h is constant
    unit_norm, _ = quad(lambda s: nz.gammas[0], 0, T)
    assert er.value == pytest.approx(0.5 * (c / unit_norm) ** 2 / T, rel=1e-9)
    assert er.value == pytest.approx(2.0, rel=1e-9)


def test_event_spec_validation():
    with pytest.raises(ValueError):
        EventSpec(threshold=math.inf)
    with pytest.raises(ValueError):
        EventSpec("sup_norm", 1.0)


def test_condition_b_decay_and_controls():
    sm = SkeletonMap(G, NoiseModel(), 1.0, 1.0, 128)
    h = Control.from_functions(1.0, 128, 8, {2: np.ones_like})
    rows = run_condition_b(sm, h, [2, 4, 8, 16, 32, 64])
    osc = [r["gap"] for r in rows if r["kind"] == "oscillating"]
    assert all(b < a for a, b in zip(osc, osc[1:]))
    assert osc[-1] <= 0.2 * osc[0]
    const = [r["gap"] for r in rows if r["kind"] == "constant"][0]
    assert const > 0.5 * osc[0]
    zero = run_condition_b(sm, h, [2, 64], amplitude=0.0)
    assert all(r["gap"] == 0 for r in zero)
    with pytest.raises(ValueError):
        run_condition_b(sm, h, [2], N=0.1)


@pytest.fixture(scope="module")
def additive_setup():
    return Setup(G, FluxModel.burgers(), NoiseModel(state_factor="additive"), SolverConfig())


def test_condition_a_infinite_delta(additive_setup):
    rows = run_condition_a(additive_setup, [1e-1, 1e-3], None, math.inf, 20, 0)
    assert all(r["p_exceed"] == 0 for r in rows)


def test_condition_a_zero_control_decreasing(additive_setup):
    rows = run_condition_a(additive_setup, [1e-1, 1e-2, 1e-3, 1e-4], None, 0.05, 60, 1)
    d = [r["mean_distance"] for r in rows]
    assert all(b < a for a, b in zip(d, d[1:]))


def test_mixture_weights_for_single_shift_match_girsanov():
    incr = RNG.normal(size=(5, 4, 2))
    s = RNG.normal(size=(4, 2))
    lam, dt = 3.0, 0.25
    lw = mixture_log_weights(incr, [s], lam, dt)
    direct = -(lam * np.sum(incr * s, axis=(1, 2)) - 0.5 * lam ** 2 * dt * np.sum(s * s))
    assert np.allclose(lw, direct)


def test_zero_threshold_event_has_probability_one(additive_setup):
    rows = estimate_mdp_probability(additive_setup, EventSpec(threshold=0.0), [1e-2], 10, 0)
    assert rows[0]["p_hat"] == 1.0 and rows[0]["normalized"] == 0.0


def test_importance_sampling_is_unbiased_on_cheap_event(additive_setup):
    ev = EventSpec(threshold=0.1)
    er = rate_of_event(ev, skeleton_map(additive_setup))
    plain = estimate_mdp_probability(additive_setup, ev, [1e-1], 400, 11)[0]
    imp = estimate_mdp_probability(additive_setup, ev, [1e-1], 400, 12, shift=er.rates)[0]
    assert abs(plain["p_hat"] - imp["p_hat"]) <= 3 * math.hypot(plain["stderr"], imp["stderr"])


def test_importance_sampling_hits_where_plain_mc_does_not(additive_setup):
    ev = EventSpec(threshold=0.5)
    er = rate_of_event(ev, skeleton_map(additive_setup))
    plain = estimate_mdp_probability(additive_setup, ev, [1e-3], 50, 5)[0]
    imp = estimate_mdp_probability(additive_setup, ev, [1e-3], 50, 5, shift=er.rates)[0]
    assert plain["hits"] == 0 and plain["kind"] == "lower_bound"
    assert plain["normalized"] == pytest.approx(-math.log(3 / 50) / plain["lambda"] ** 2)
    assert imp["hits"] > 0 and imp["kind"] == "estimate"
    assert 0 < imp["normalized"] < math.inf
