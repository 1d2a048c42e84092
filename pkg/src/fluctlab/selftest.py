"""Fast invariant suite behind the ``selftest`` command."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .harness import run_replicates
from .limits import linear_spde_batch
from .mdp import rate_function, skeleton_map
from .model import Control, Field, FluxModel, TorusGrid, batch_increments, kinetic_distance, lp_norm
from .rng import replicate_keys
from .solvers import Setup, SolverConfig, simulate_spde, solve_deterministic


def burgers_riemann_exact(x, t):
    """Burgers on the unit torus from u0 = 1 on [0, 1/2), 0 elsewhere, for t <= 1/2.

    A rarefaction fans out from x = 0 and a shock leaves x = 1/2 at speed 1/2.
    """
    x = np.asarray(x, dtype=float)
    fan = np.clip(x / t, 0.0, 1.0) if t > 0 else (x < 0.5).astype(float)
    return np.where(x < 0.5 + 0.5 * t, fan, 0.0)


def _row(name, value, tol, passed):
    return {"check": name, "value": float(value), "tolerance": float(tol), "passed": bool(passed)}


def check_constant_preservation(setup: Setup, n_steps: int = 1000) -> dict:
    grid = setup.grid
    cfg = setup.cfg.with_(t_end=n_steps * grid.dx, n_steps=None, viscosity=0.0)
    traj = solve_deterministic(Field.constant(grid, 1.0), setup.flux, cfg)
    dev = float(np.max(np.abs(traj.values - 1.0)))
    return _row("constant_preservation", dev, 0.0, dev == 0.0 and len(traj.times) == n_steps + 1)


def check_kinetic_identity(grid: TorusGrid, pairs: int = 1000, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        u = Field(grid, rng.normal(size=grid.n_cells))
        v = Field(grid, rng.normal(size=grid.n_cells))
        worst = max(worst, abs(kinetic_distance(u, v) - lp_norm(u - v, 1)))
    return _row("kinetic_bracket_identity", worst, 1e-12, worst <= 1e-12)


def check_riemann(n_cells: int = 128) -> dict:
    grid = TorusGrid(n_cells)
    x = grid.cell_centers
    u0 = Field(grid, (x < 0.5).astype(float))
    traj = solve_deterministic(u0, FluxModel.burgers(), SolverConfig(t_end=0.5))
    err = lp_norm(traj.values[-1] - burgers_riemann_exact(x, 0.5), 1, grid.dx)
    return _row("riemann_l1_error_over_dx", err / grid.dx, 5.0, err <= 5 * grid.dx)


def check_linear_flux_exactness(setup: Setup, replicates: int = 4) -> dict:
    grid = setup.grid
    lin = FluxModel.linear(1.0)
    cfg = setup.cfg.with_(viscosity=0.0)
    plan = setup.with_(flux=lin).plan(cfg)
    keys = replicate_keys(0, "selftest", range(replicates))
    incr = batch_increments(keys, plan.n_steps, setup.noise.n_modes, cfg.t_end)
    noise = replace(setup.noise, state_factor="additive")
    eps = 1e-2
    _, u = simulate_spde(grid, np.ones(grid.n_cells), lin, noise, incr, eps, cfg, plan)
    ref = linear_spde_batch(grid, noise, 1.0, incr, cfg.t_end, rule="endpoint")
    dev = float(np.max(np.abs((u - 1.0) / np.sqrt(eps) - ref)))
    return _row("linear_flux_matches_spectral", dev, 1e-9, dev <= 1e-9)


def check_adjoint(setup: Setup, pairs: int = 10, seed: int = 1) -> dict:
    smap = skeleton_map(setup)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        h = rng.normal(size=smap.control_shape)
        g = rng.normal(size=smap.trajectory_shape)
        a = smap.inner_trajectory(smap.forward(h), g)
        b = smap.inner_control(h, smap.adjoint(g))
        worst = max(worst, abs(a - b) / max(abs(a), 1e-300))
    return _row("skeleton_adjoint", worst, 1e-10, worst <= 1e-10)


def check_rate_recovery(setup: Setup) -> list:
    smap = skeleton_map(setup)
    M, K = smap.control_shape
    h = Control.from_functions(setup.cfg.t_end, M, K, {min(2, K): lambda t: np.cos(2 * np.pi * t)})
    g = smap.forward(h.rates)
    res = rate_function(g, smap)
    resim = smap.forward(res.rates)
    err = np.sqrt(smap.inner_trajectory(resim - g, resim - g))
    twice = rate_function(2 * g, smap)
    rel = abs(twice.value - 4 * res.value) / (4 * res.value)
    return [_row("rate_residual", err, 1e-6, err <= 1e-6),
            _row("rate_below_generating_energy", res.value - h.energy, 1e-8,
                 res.value <= h.energy + 1e-8),
            _row("rate_homogeneity", rel, 1e-6, rel <= 1e-6)]


def check_parallel_determinism(seed: int = 3) -> dict:
    def closure(keys):
        return batch_increments(keys, 16, 3, 1.0).sum(axis=(1, 2))[:, None]

    a = run_replicates(closure, 60, seed, 1, "selftest")
    b = run_replicates(closure, 60, seed, 4, "selftest")
    same = np.array_equal(a.mean, b.mean) and np.array_equal(a.stderr, b.stderr)
    return _row("parallel_determinism", 0.0 if same else 1.0, 0.0, same)


def run_selftest(setup: Setup) -> list:
    rows = [check_constant_preservation(setup), check_kinetic_identity(setup.grid),
            check_riemann(), check_adjoint(setup)]
    if setup.noise.n_modes > 0:
        rows.append(check_linear_flux_exactness(setup))
        rows += check_rate_recovery(setup)
    rows.append(check_parallel_determinism())
    return rows
