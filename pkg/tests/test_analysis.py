import math

import numpy as np
import pytest

from fluctlab.analysis import (decreasing_within, fit_loglog_slope, ito_isometry_check,
                               run_clt_experiment, run_h_gap, run_scaling_experiment,
                               run_viscous_gap)
from fluctlab.harness import ExperimentError
from fluctlab.model import FluxModel, NoiseModel, TorusGrid
from fluctlab.solvers import Setup, SolverConfig

EPS4 = [1e-1, 1e-2, 1e-3, 1e-4]


def test_slope_exact_line():
    fit = fit_loglog_slope([(e, e, 0.01 * e) for e in EPS4])
    assert fit.slope == pytest.approx(1.0, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0)
    assert fit.ci_lo <= 1.0 <= fit.ci_hi


def test_slope_noisy_synthetic():
    rng = np.random.default_rng(0)
    eps = np.logspace(-1, -4, 6)
    y = 3 * eps ** 1.5 * (1 + 0.01 * rng.normal(size=6))
    fit = fit_loglog_slope([(e, v, 0.01 * v) for e, v in zip(eps, y)])
    assert 1.4 <= fit.slope <= 1.6
    assert fit.ci_lo < fit.slope < fit.ci_hi


def test_slope_unweighted_without_errors():
    fit = fit_loglog_slope([(e, 2 * e ** 2) for e in EPS4])
    assert fit.slope == pytest.approx(2.0)


@pytest.mark.parametrize("pts", [
    [(1e-1, 1.0, 0.1), (1e-1, 2.0, 0.1), (1e-2, 0.5, 0.1)],
    [(1e-1, 1.0, 0.1), (1e-2, 0.0, 0.1), (1e-3, 0.5, 0.1)],
    [(1e-1, 1.0, 0.1), (1e-2, 0.5, 0.1)],
])
def test_slope_rejects_degenerate_designs(pts):
    with pytest.raises(ValueError):
        fit_loglog_slope(pts)


def test_decreasing_within():
    assert decreasing_within([3, 2, 2.1], [0.1, 0.1, 0.1])
    assert not decreasing_within([3, 2, 3], [0.1, 0.1, 0.1])


@pytest.fixture(scope="module")
def setup():
    return Setup(TorusGrid(64), FluxModel.burgers(), NoiseModel(), SolverConfig())


def test_scaling_slopes(setup):
    r2 = run_scaling_experiment(setup, 2, EPS4, 0.01, 40, 1)
    r4 = run_scaling_experiment(setup, 4, EPS4, 0.01, 40, 1)
    assert 0.85 <= r2.slope <= 1.15
    assert 1.7 <= r4.slope <= 2.3
    d = r2.as_dict()
    assert {"slope", "ci_lo", "ci_hi", "r2"} <= set(d)


def test_scaling_requires_decreasing_grid_and_q(setup):
    with pytest.raises(ValueError):
        run_scaling_experiment(setup, 2, [1e-4, 1e-3, 1e-2, 1e-1], replicates=2)
    with pytest.raises(ValueError):
        run_scaling_experiment(setup, 1, EPS4, replicates=2)
    with pytest.raises(ValueError):
        run_scaling_experiment(setup, 2, EPS4[:3], replicates=2)


def test_zero_noise_is_degenerate(setup):
    quiet = setup.with_(noise=NoiseModel(n_modes=0))
    r = run_scaling_experiment(quiet, 2, EPS4, 0.01, 5, 0)
    assert r.degenerate and all(m == 0 for m in r.estimates) and math.isnan(r.slope)
    c = run_clt_experiment(quiet, EPS4, 5, 0)
    assert all(m == 0 for m in c.estimates)
    h = run_h_gap(quiet, 0.05, [1e-1, 1e-2, 1e-3], 5, 0)
    assert all(r["sup_gap"] == 0 for r in h.rows)


def test_clt_trend(setup):
    rep = run_clt_experiment(setup, EPS4, 40, 2, companion_etas=[0.05])
    assert rep.decreasing
    assert rep.estimates[-1] <= 0.25 * rep.estimates[0]
    assert all(np.isfinite(rep.estimates)) and min(rep.estimates) >= 0
    m, s = rep.companions[0.05]
    assert m[-1] < m[0]
    assert "gap_eta_0.05" in rep.rows()[0]


def test_clt_near_linear_flux_additive_noise(setup):
    near = setup.with_(flux=FluxModel.polynomial([0.0, 1.0, 1e-4]),
                       noise=NoiseModel(state_factor="additive"))
    rep = run_clt_experiment(near, [1e-1, 1e-2], 20, 3)
    assert rep.estimates[1] <= 0.1 * rep.limit_scale


def test_viscous_gap_table(setup):
    table = run_viscous_gap(setup, [1e-1, 1e-2], [0.0, 0.1, 0.03, 0.01], 30, 4)
    zero = [r for r in table.rows if r["eta"] == 0.0]
    assert all(r["nonlinear_gap"] == 0 and r["linear_gap"] == 0 for r in zero)
    lin = [s["linear_gap"] for s in table.sup[1:]]
    assert lin[0] > lin[1] > lin[2]
    sup = [(s["sup_nonlinear_gap"], s["sup_nonlinear_stderr"]) for s in table.sup[1:]]
    assert decreasing_within([v for v, _ in sup], [e for _, e in sup])


def test_h_gap_slope(setup):
    rep = run_h_gap(setup, 0.05, [1e-1, 1e-2, 1e-3], 40, 5)
    assert 0.8 <= rep.fit.slope <= 1.2
    assert rep.rows[-1]["sup_gap"] * 4 <= rep.rows[0]["sup_gap"]
    with pytest.raises(ValueError):
        run_h_gap(setup, 0.0, [1e-1, 1e-2, 1e-3], 2, 0)


def test_ito_isometry_check(setup):
    r = ito_isometry_check(setup, 0.5, 2000, 6)
    assert r["relative_error"] <= 0.1


def test_solver_failure_is_annotated(setup):
    fragile = setup.with_(cfg=SolverConfig(blowup=1.0 + 1e-9))
    with pytest.raises(ExperimentError) as err:
        run_scaling_experiment(fragile, 2, EPS4, 0.01, 4, 0)
    assert err.value.key is not None
