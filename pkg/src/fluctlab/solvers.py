"""Finite-volume time steppers on a shared Lie-splitting framework.

Each time step performs, in order,

1. transport: an exact shift by a whole number of cells at the frame speed,
   followed by a monotone finite-volume update for the residual flux
   A(u) - c u (sub-stepped to satisfy the CFL bound of the residual speed);
2. diffusion, when the viscosity is positive;
3. the stochastic (Euler-Maruyama) and control forcing.

The noise time grid is fixed before the run so that runs with different
noise intensities or viscosities can share Brownian increments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .limits import apply_heat, heat_multiplier, integer_shift
from .model import (Control, DeviationScale, Field, FluxModel, NoiseModel, TorusGrid, Trajectory,
                    WienerPath, output_indices)


class SolverError(RuntimeError):
    """Numerical failure: blow-up, NaN, CFL underflow or mismatched inputs."""

    def __init__(self, message, replicates=None):
        super().__init__(message)
        self.replicates = list(replicates) if replicates is not None else []


SCHEMES = ("engquist_osher", "lax_friedrichs")
DIFFUSIONS = ("spectral", "explicit")


@dataclass(frozen=True)
class SolverConfig:
    cfl: float = 0.4
    t_end: float = 1.0
    viscosity: float = 0.0
    scheme: str = "engquist_osher"
    output_stride: int = 1
    splitting: str = "lie"
    frame_shift: bool = True
    diffusion: str = "spectral"
    reference_speed: float | None = None
    range_margin: float = 1.0
    n_steps: int | None = None
    max_substeps: int = 10_000
    blowup: float = 1e6

    def __post_init__(self):
        if not (0.0 < self.cfl <= 1.0):
            raise ValueError("cfl must lie in (0, 1]")
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        if self.viscosity < 0:
            raise ValueError("viscosity must be non-negative")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.diffusion not in DIFFUSIONS:
            raise ValueError(f"unknown diffusion {self.diffusion!r}")
        if self.splitting != "lie":
            raise ValueError("only Lie splitting is supported")
        if self.output_stride < 1:
            raise ValueError("output_stride must be >= 1")

    def with_(self, **kw) -> "SolverConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class StepPlan:
    """Fixed time grid and frame speed of a run."""

    n_steps: int
    dt: float
    shift: int
    frame_speed: float

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.n_steps * self.dt, self.n_steps + 1)


def plan_steps(grid: TorusGrid, flux: FluxModel, cfg: SolverConfig, u0) -> StepPlan:
    """Choose the noise time grid and frame speed before the run.

    The frame speed is a(mean u0).  With ``frame_shift`` the step is chosen so
    that the frame moves exactly one cell per step whenever t_end is a whole
    number of such steps; otherwise the step comes from the CFL bound on an
    a-priori state range and the frame moves by the nearest whole number of
    cells.
    """
    u0 = np.asarray(u0, dtype=float)
    T = cfg.t_end
    c = cfg.reference_speed
    if c is None:
        c = float(flux.speed(float(np.mean(u0))))
    if cfg.n_steps is None and cfg.frame_shift and c != 0.0:
        m0 = T * abs(c) / grid.dx
        if abs(m0 - round(m0)) <= 1e-9 and round(m0) >= 1:
            M = int(round(m0))
            return _plan(grid, c, T, M, cfg)
    if cfg.n_steps is not None:
        M = int(cfg.n_steps)
    else:
        lo = float(np.min(u0)) - cfg.range_margin
        hi = float(np.max(u0)) + cfg.range_margin
        xs = np.linspace(lo, hi, 257)
        bound = float(np.max(np.abs(flux.speed(xs))))
        M = max(1, math.ceil(T * bound / (cfg.cfl * grid.dx)))
    return _plan(grid, c, T, M, cfg)


def _plan(grid, c, T, M, cfg):
    dt = T / M
    if not cfg.frame_shift:
        return StepPlan(M, dt, 0, 0.0)
    s = integer_shift(c, dt, grid.dx)
    if s is not None:
        return StepPlan(M, dt, s, c)
    s = int(round(c * dt / grid.dx))
    return StepPlan(M, dt, s, s * grid.dx / dt)


def _numerical_flux(flux: FluxModel, u, ur, scheme):
    central = 0.5 * (flux.flux(u) + flux.flux(ur))
    if scheme == "engquist_osher":
        return central - 0.5 * np.sign(ur - u) * flux.abs_speed_integral(u, ur)
    # local Lax-Friedrichs (Rusanov)
    alpha = np.maximum(np.abs(flux.speed(u)), np.abs(flux.speed(ur)))
    return central - 0.5 * alpha * (ur - u)


class _Stepper:
    """Deterministic part of one Lie step on a batch of states (R, N)."""

    def __init__(self, grid: TorusGrid, flux: FluxModel, cfg: SolverConfig, plan: StepPlan):
        self.grid = grid
        self.cfg = cfg
        self.plan = plan
        self.residual = flux.minus_linear(plan.frame_speed)
        self.trivial_residual = bool(np.all(np.array(self.residual.coefficients[1:]) == 0.0))
        self.eta = cfg.viscosity
        if self.eta > 0 and cfg.diffusion == "spectral":
            self.heat = heat_multiplier(grid, self.eta, plan.dt)

    def transport(self, u):
        if self.plan.shift:
            u = np.roll(u, self.plan.shift, axis=-1)
        if self.trivial_residual:
            return u
        dx, dt = self.grid.dx, self.plan.dt
        speed = np.max(np.abs(self.residual.speed(u)), axis=-1)
        n_sub = np.maximum(1, np.ceil(dt * speed / (self.cfg.cfl * dx))).astype(int)
        if np.any(n_sub > self.cfg.max_substeps):
            bad = np.flatnonzero(n_sub > self.cfg.max_substeps)
            raise SolverError(f"CFL underflow: more than {self.cfg.max_substeps} sub-steps", bad)
        u = np.array(u, copy=True)
        sub_dt = dt / n_sub
        for s in range(int(n_sub.max())):
            rows = n_sub > s
            if rows.all():
                u = self._fv(u, sub_dt)
            else:
                u[rows] = self._fv(u[rows], sub_dt[rows])
        return u

    def _fv(self, u, sub_dt):
        ur = np.roll(u, -1, axis=-1)
        F = _numerical_flux(self.residual, u, ur, self.cfg.scheme)
        return u - (sub_dt / self.grid.dx)[:, None] * (F - np.roll(F, 1, axis=-1))

    def diffuse(self, u):
        if self.eta <= 0:
            return u
        if self.cfg.diffusion == "spectral":
            return apply_heat(u, self.heat)
        dx, dt = self.grid.dx, self.plan.dt
        n = max(1, math.ceil(self.eta * dt / (0.4 * dx * dx)))
        k = self.eta * (dt / n) / (dx * dx)
        for _ in range(n):
            u = u + k * (np.roll(u, 1, axis=-1) - 2.0 * u + np.roll(u, -1, axis=-1))
        return u


def _march(grid, flux, cfg, plan, u0, forcing=None, replicate_ids=None):
    """Run the split scheme on a batch; returns (times, values (R, n_out, N))."""
    u = np.array(u0, dtype=float, copy=True)
    if u.ndim == 1:
        u = u[None]
    R, N = u.shape
    ids = np.arange(R) if replicate_ids is None else np.asarray(replicate_ids)
    stepper = _Stepper(grid, flux, cfg, plan)
    keep = output_indices(plan.n_steps, cfg.output_stride)
    out = np.empty((R, len(keep), N))
    out[:, 0] = u
    slot = 1
    for j in range(plan.n_steps):
        u = stepper.transport(u)
        u = stepper.diffuse(u)
        if forcing is not None:
            u = forcing(j, u)
        bad = ~np.all(np.isfinite(u), axis=-1) | (np.max(np.abs(u), axis=-1) > cfg.blowup)
        if bad.any():
            raise SolverError(
                f"blow-up or NaN at step {j + 1} (t = {(j + 1) * plan.dt:.6g})", ids[bad])
        if slot < len(keep) and keep[slot] == j + 1:
            out[:, slot] = u
            slot += 1
    return plan.times[keep], out


def _noise_field(spatial, incr_j):
    """sum_k g_k-profile * increment_k for a batch of increments (R, K)."""
    R = incr_j.shape[0]
    acc = np.zeros((R, spatial.shape[0]))
    for k in range(spatial.shape[1]):
        acc = acc + incr_j[:, k, None] * spatial[None, :, k]
    return acc


def _check_increments(increments, plan, noise):
    incr = np.asarray(increments, dtype=float)
    if incr.ndim == 2:
        incr = incr[None]
    if incr.shape[1] != plan.n_steps or incr.shape[2] != noise.n_modes:
        raise SolverError(
            f"path has shape {incr.shape[1:]}, solver needs ({plan.n_steps}, {noise.n_modes})")
    return incr


# ---------------------------------------------------------------------------
# public solvers


def _values(u0):
    return u0.values if isinstance(u0, Field) else np.asarray(u0, dtype=float)


def solve_deterministic(u0: Field, flux: FluxModel, cfg: SolverConfig) -> Trajectory:
    """Inviscid conservation law; cfg.viscosity is ignored (set to 0)."""
    cfg = cfg.with_(viscosity=0.0)
    plan = plan_steps(u0.grid, flux, cfg, u0.values)
    times, vals = _march(u0.grid, flux, cfg, plan, u0.values)
    return Trajectory(u0.grid, times, vals[0], {"eta": 0.0, "eps": 0.0})


def solve_viscous_deterministic(u0: Field, flux: FluxModel, cfg: SolverConfig) -> Trajectory:
    if cfg.viscosity <= 0:
        raise ValueError("viscous solver needs viscosity > 0")
    plan = plan_steps(u0.grid, flux, cfg, u0.values)
    times, vals = _march(u0.grid, flux, cfg, plan, u0.values)
    return Trajectory(u0.grid, times, vals[0], {"eta": cfg.viscosity, "eps": 0.0})


def simulate_spde(grid: TorusGrid, u0, flux: FluxModel, noise: NoiseModel, increments,
                  eps: float, cfg: SolverConfig, plan: StepPlan | None = None,
                  replicate_ids=None):
    """Batched perturbed equation du + A(u)_x dt = eta u_xx dt + sqrt(eps) Phi(u) dW.

    ``increments`` is (R, M, K); returns (times, values (R, n_out, N)).
    """
    if not (0.0 <= eps <= 1.0):
        raise ValueError("eps must lie in [0, 1]")
    u0 = _values(u0)
    plan = plan or plan_steps(grid, flux, cfg, u0)
    incr = _check_increments(increments, plan, noise)
    R = incr.shape[0]
    start = np.broadcast_to(u0, (R, grid.n_cells))
    if eps == 0.0 or noise.n_modes == 0:
        return _march(grid, flux, cfg, plan, start, None, replicate_ids)
    spatial = noise.spatial_matrix(grid)
    amp = math.sqrt(eps)

    def forcing(j, u):
        return u + amp * noise.sigma(u) * _noise_field(spatial, incr[:, j])

    return _march(grid, flux, cfg, plan, start, forcing, replicate_ids)


def solve_spde(u0: Field, flux: FluxModel, noise: NoiseModel, path: WienerPath, eps: float,
               cfg: SolverConfig) -> Trajectory:
    plan = plan_steps(u0.grid, flux, cfg, u0.values)
    if path.n_steps != plan.n_steps:
        raise SolverError(f"path has {path.n_steps} steps, solver needs {plan.n_steps}")
    times, vals = simulate_spde(u0.grid, u0, flux, noise, path.increments[None], eps, cfg, plan)
    return Trajectory(u0.grid, times, vals[0],
                      {"eps": eps, "eta": cfg.viscosity, "seed": path.key.seed,
                       "replicate": path.key.replicate})


def controlled_plan(grid: TorusGrid, flux: FluxModel, cfg: SolverConfig) -> StepPlan:
    """Step plan for the rescaled equation; its frame speed is a(1)."""
    return plan_steps(grid, flux, cfg.with_(reference_speed=float(flux.speed(1.0))),
                      np.zeros(grid.n_cells))


def simulate_controlled(grid: TorusGrid, flux: FluxModel, noise: NoiseModel, increments,
                        eps: float, scale: DeviationScale, control_rates, cfg: SolverConfig,
                        plan: StepPlan | None = None, replicate_ids=None):
    """Batched controlled equation in the rescaled variable, started at 0.

    dX + Psi(X)_x dt = eta X_xx dt + Phi(1 + mu X) (lambda^-1 dW + h'(t) dt)

    ``control_rates`` is None, a (M, K) array shared by all replicates, or a
    (R, M, K) array.
    """
    plan = plan or controlled_plan(grid, flux, cfg)
    incr = _check_increments(increments, plan, noise)
    R = incr.shape[0]
    psi = flux.psi(eps, scale)
    lam, mu = scale.lam(eps), scale.mu(eps)
    spatial = noise.spatial_matrix(grid)
    rates = None
    if control_rates is not None:
        rates = np.asarray(control_rates, dtype=float)
        if rates.ndim == 2:
            rates = np.broadcast_to(rates, (R,) + rates.shape)
        if rates.shape != incr.shape:
            raise SolverError(f"control has shape {rates.shape[1:]}, path has {incr.shape[1:]}")
    start = np.zeros((R, grid.n_cells))
    dt = plan.dt

    def forcing(j, x):
        drive = incr[:, j] / lam
        if rates is not None:
            drive = drive + rates[:, j] * dt
        if noise.n_modes == 0:
            return x
        return x + noise.sigma(1.0 + mu * x) * _noise_field(spatial, drive)

    return _march(grid, psi, cfg, plan, start, forcing, replicate_ids)


def solve_controlled_spde(grid: TorusGrid, flux: FluxModel, noise: NoiseModel, path: WienerPath,
                          eps: float, scale: DeviationScale, h: Control | None,
                          cfg: SolverConfig) -> Trajectory:
    plan = controlled_plan(grid, flux, cfg)
    if path.n_steps != plan.n_steps:
        raise SolverError(f"path has {path.n_steps} steps, solver needs {plan.n_steps}")
    rates = None if h is None else h.rates
    times, vals = simulate_controlled(grid, flux, noise, path.increments[None], eps, scale,
                                      rates, cfg, plan)
    return Trajectory(grid, times, vals[0], {"eps": eps, "alpha": scale.alpha})


def derive_fluctuation(traj: Trajectory, eps: float, scale: DeviationScale | None = None,
                       background: float = 1.0) -> Trajectory:
    """(u - 1)/sqrt(eps), or (u - 1)/(sqrt(eps) lambda(eps)) when a scale is given."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    denom = math.sqrt(eps) if scale is None else scale.mu(eps)
    return Trajectory(traj.grid, traj.times, (traj.values - background) / denom,
                      dict(traj.meta, fluctuation=True))


def restore_from_fluctuation(traj: Trajectory, eps: float, scale: DeviationScale | None = None,
                             background: float = 1.0) -> Trajectory:
    denom = math.sqrt(eps) if scale is None else scale.mu(eps)
    return Trajectory(traj.grid, traj.times, background + denom * traj.values, dict(traj.meta))


__all__ = [
    "SolverConfig", "SolverError", "StepPlan", "Trajectory", "plan_steps", "controlled_plan",
    "solve_deterministic", "solve_viscous_deterministic", "solve_spde", "simulate_spde",
    "solve_controlled_spde", "simulate_controlled", "derive_fluctuation",
    "restore_from_fluctuation", "Setup",
]


@dataclass(frozen=True)
class Setup:
    """Everything an experiment needs besides its own parameters."""

    grid: TorusGrid
    flux: FluxModel
    noise: NoiseModel
    cfg: SolverConfig
    scale: DeviationScale = DeviationScale()

    def with_(self, **kw) -> "Setup":
        return replace(self, **kw)

    def plan(self, cfg: SolverConfig | None = None) -> StepPlan:
        """Step plan for runs started at the background state 1."""
        return plan_steps(self.grid, self.flux, cfg or self.cfg, np.ones(self.grid.n_cells))

    def controlled_plan(self, cfg: SolverConfig | None = None) -> StepPlan:
        return controlled_plan(self.grid, self.flux, cfg or self.cfg)
