import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluctlab.limits import (SpectralPropagator, convolve, linear_spde_batch, propagate,
                             skeleton_batch, solve_linear_spde, solve_skeleton)
from fluctlab.model import Control, NoiseModel, TorusGrid, WienerPath, batch_increments, l1l1_values
from fluctlab.rng import replicate_keys, StreamKey

G = TorusGrid(64)
RNG = np.random.default_rng(11)


def l2(f):
    return np.sqrt(G.dx * np.sum(f ** 2, axis=-1))


def test_zero_time_is_identity():
    f = RNG.normal(size=64)
    assert np.array_equal(propagate(f, 0.0, SpectralPropagator(G, 1.0, 0.1)), f)


def test_whole_cell_shift_is_exact_roll():
    f = RNG.normal(size=64)
    out = SpectralPropagator(G, 1.0).propagate(f, 5 * G.dx)
    assert np.array_equal(out, np.roll(f, 5))


def test_fractional_shift_moves_smooth_profile():
    x = G.cell_centers
    f = np.sin(2 * np.pi * x)
    out = SpectralPropagator(G, 1.0).propagate(f, 0.123)
    assert np.allclose(out, np.sin(2 * np.pi * (x - 0.123)), atol=1e-12)


@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0))
@settings(max_examples=30, deadline=None)
def test_semigroup_property(t1, t2):
    P = SpectralPropagator(G, 0.7, 0.02)
    f = np.cos(6 * np.pi * G.cell_centers) + 0.3
    assert np.allclose(P.propagate(P.propagate(f, t1), t2), P.propagate(f, t1 + t2), atol=1e-12)


def without_nyquist(f):
    c = np.fft.rfft(f)
    c[-1] = 0.0
    return np.fft.irfft(c, n=len(f))


def test_unitarity_and_dissipation():
    f = without_nyquist(RNG.normal(size=64))
    assert l2(SpectralPropagator(G, 1.0).propagate(f, 0.377)) == pytest.approx(l2(f), rel=1e-12)
    # a real grid cannot carry a fractional shift of the Nyquist mode: it is damped, never amplified
    g = RNG.normal(size=64)
    assert l2(SpectralPropagator(G, 1.0).propagate(g, 0.377)) <= l2(g)
    P = SpectralPropagator(G, 1.0, 0.05)
    norms = [l2(P.propagate(f, t)) for t in (0.0, 0.01, 0.1, 0.5)]
    assert all(b <= a + 1e-15 for a, b in zip(norms, norms[1:]))


def test_heat_decay_of_single_mode():
    x = G.cell_centers
    P = SpectralPropagator(G, 0.0, 0.03)
    out = P.propagate(np.cos(4 * np.pi * x), 0.2)
    assert np.allclose(out, np.exp(-0.03 * (4 * np.pi) ** 2 * 0.2) * np.cos(4 * np.pi * x), atol=1e-13)


def test_adjoint_under_dx_inner_product():
    P = SpectralPropagator(G, 0.8, 0.01)
    f, g = RNG.normal(size=64), RNG.normal(size=64)
    lhs = G.dx * np.dot(P.propagate(f, 0.3), g)
    rhs = G.dx * np.dot(f, P.adjoint().propagate(g, 0.3))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_zero_path_gives_zero():
    nz = NoiseModel()
    vals = linear_spde_batch(G, nz, 1.0, np.zeros((2, 64, 8)), 1.0)
    assert np.all(vals == 0)


@pytest.mark.parametrize("rule", ["exact", "endpoint"])
def test_ito_isometry_statistical(rule):
    grid = TorusGrid(32)
    nz = NoiseModel(n_modes=5, state_factor="additive")
    keys = replicate_keys(21, "iso", range(4000))
    incr = batch_increments(keys, 16, 5, 0.5)
    vals = linear_spde_batch(grid, nz, 1.0, incr, 0.5, rule=rule)[:, -1]
    est = grid.dx * np.sum(vals ** 2, axis=-1)
    exact = 0.5 * np.sum(nz.gammas ** 2)
    assert abs(est.mean() - exact) < 4 * est.std() / np.sqrt(len(est)) + 0.01 * exact


def test_skeleton_closed_form_single_cosine_mode():
    nz = NoiseModel(state_factor="additive")
    c, k = 1.3, 2
    h = Control.from_functions(1.0, 100, 8, {k: lambda t: c * np.ones_like(t)})
    tr = solve_skeleton(G, nz, 1.0, h)
    x = G.cell_centers
    for j in (1, 37, 100):
        t = tr.times[j]
        exact = nz.gammas[k - 1] * c * np.sqrt(2) * (np.sin(2 * np.pi * x)
                                                    - np.sin(2 * np.pi * (x - t))) / (2 * np.pi)
        assert np.max(np.abs(tr.values[j] - exact)) <= 1e-8


def test_skeleton_closed_form_with_viscosity():
    nz = NoiseModel(state_factor="additive")
    eta, c = 0.02, 0.7
    h = Control.from_functions(1.0, 64, 8, {2: lambda t: c * np.ones_like(t)})
    tr = solve_skeleton(G, nz, 1.0, h, eta=eta)
    x, t = G.cell_centers, 1.0
    w = 2 * np.pi
    z = eta * w ** 2 + 1j * w
    # gamma c sqrt2 Re[ e^{i w x} (1 - e^{-z t}) / z ]
    exact = nz.gammas[1] * c * np.sqrt(2) * np.real(np.exp(1j * w * x) * (1 - np.exp(-z * t)) / z)
    assert np.max(np.abs(tr.values[-1] - exact)) <= 1e-8


def test_skeleton_linearity():
    nz = NoiseModel()
    h1 = Control(1.0, RNG.normal(size=(64, 8)))
    h2 = Control(1.0, RNG.normal(size=(64, 8)))
    a = solve_skeleton(G, nz, 1.0, h1 + h2).values
    b = solve_skeleton(G, nz, 1.0, h1).values + solve_skeleton(G, nz, 1.0, h2).values
    assert np.max(np.abs(a - b)) <= 1e-10


def test_skeleton_bound():
    nz = NoiseModel()
    CT = 1.0 * np.sqrt(np.sum(nz.gammas ** 2))
    for _ in range(10):
        h = Control(1.0, RNG.normal(size=(64, 8)))
        X = solve_skeleton(G, nz, 1.0, h).values
        assert l1l1_values(X, 1 / 64, G.dx) <= CT * np.sqrt(2 * h.energy)


@pytest.mark.parametrize("rule", ["exact", "endpoint"])
def test_coupled_path_consistency(rule):
    nz = NoiseModel()
    path = WienerPath(StreamKey(2), 64, 8, 1.0)
    incr = path.increments.copy()
    incr[:, [0, 1, 3, 4, 5, 6, 7]] = 0.0
    lin = linear_spde_batch(G, nz, 1.0, incr[None], 1.0, rule=rule)[0]
    sk = skeleton_batch(G, nz, 1.0, incr[None] / path.dt, 1.0, rule=rule)[0]
    assert np.allclose(lin, sk, atol=1e-14)


def test_viscous_linear_gap_decreases_in_eta():
    nz = NoiseModel()
    path = WienerPath(StreamKey(5), 64, 8, 1.0)
    base = solve_linear_spde(G, nz, 1.0, path).values
    gaps = [l1l1_values(solve_linear_spde(G, nz, 1.0, path, eta).values - base, 1 / 64, G.dx)
            for eta in (0.1, 0.03, 0.01, 0.003)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_convolve_rejects_bad_input():
    with pytest.raises(ValueError):
        convolve(SpectralPropagator(G, 1.0), np.zeros((1, 4, 3)), np.zeros((64, 2)), 0.1)
    with pytest.raises(ValueError):
        convolve(SpectralPropagator(G, 1.0), np.zeros((1, 4, 2)), np.zeros((64, 2)), 0.1,
                 rule="midpoint")
