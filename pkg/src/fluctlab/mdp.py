"""Moderate-deviation side: rate function, event rates, conditions (a) and (b).

The skeleton map K sends piecewise-constant control rates (M, K) to the
trajectory of the controlled linear transport equation.  The rate of a
target g is the least control energy with K h = g.  Trajectory targets are
inverted directly since the map is injective; terminal targets go through a
conjugate-gradient solve of the Gram system K K* w = g (Craig's method),
where K* is the time-reversed adjoint convolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .limits import SpectralPropagator, convolve
from .model import Control, DeviationScale, NoiseModel, TorusGrid, batch_increments, l1l1_values
from .harness import run_replicates
from .solvers import Setup, simulate_controlled


class SkeletonMap:
    """Linear map from control rates to skeleton trajectories, with its adjoint.

    Trajectory inner product: dt * dx * sum over the samples t_1..t_M (the
    t_0 sample is always 0).  Terminal inner product: dx * sum.  Control inner
    product: dt * sum over time cells and modes.
    """

    def __init__(self, grid: TorusGrid, noise: NoiseModel, speed: float, t_end: float,
                 n_steps: int, eta: float = 0.0, rule: str = "endpoint"):
        self.grid = grid
        self.noise = noise
        self.speed = speed
        self.t_end = t_end
        self.n_steps = n_steps
        self.eta = eta
        self.rule = rule
        self.dt = t_end / n_steps
        self.prop = SpectralPropagator(grid, speed, eta)
        self.prop_adj = self.prop.adjoint()
        self.spatial = noise.spatial_matrix(grid) * noise.sigma(1.0)

    @property
    def control_shape(self):
        return (self.n_steps, self.noise.n_modes)

    @property
    def trajectory_shape(self):
        return (self.n_steps + 1, self.grid.n_cells)

    def forward(self, rates) -> np.ndarray:
        rates = np.asarray(rates, dtype=float)
        return convolve(self.prop, rates[None] * self.dt, self.spatial, self.dt, 1, self.rule)[0]

    def terminal(self, rates) -> np.ndarray:
        return self.forward(rates)[-1]

    def adjoint(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        M = self.n_steps
        out = np.empty(self.control_shape)
        rho = np.zeros(self.grid.n_cells)
        for j in range(M - 1, -1, -1):
            rho = g[j + 1] + self.prop_adj.propagate(rho, self.dt)
            out[j] = self.dt * self.grid.dx * (self.spatial.T @ self._avg_adj(rho))
        return out

    def terminal_adjoint(self, g_end) -> np.ndarray:
        g_end = np.asarray(g_end, dtype=float)
        out = np.empty(self.control_shape)
        rho = g_end.copy()
        for j in range(self.n_steps - 1, -1, -1):
            out[j] = self.grid.dx * (self.spatial.T @ self._avg_adj(rho))
            rho = self.prop_adj.propagate(rho, self.dt)
        return out

    def _avg_adj(self, rho):
        return self.prop_adj.cell_average(rho, self.dt) if self.rule == "exact" else rho

    def inner_trajectory(self, a, b) -> float:
        return self.dt * self.grid.dx * float(np.sum(a[1:] * b[1:]))

    def inner_terminal(self, a, b) -> float:
        return self.grid.dx * float(np.sum(a * b))

    def inner_control(self, a, b) -> float:
        return self.dt * float(np.sum(a * b))

    def energy(self, rates) -> float:
        return 0.5 * self.inner_control(rates, rates)

    def control(self, rates) -> Control:
        return Control(self.t_end, rates)


@dataclass
class RateResult:
    value: float
    rates: np.ndarray
    residual: float
    iterations: int
    converged: bool
    infeasible: bool = False
    history: list = field(default_factory=list, repr=False)

    @property
    def energy(self) -> float:
        return self.value

    def as_dict(self) -> dict:
        return {"I": self.value, "residual": self.residual, "iterations": self.iterations,
                "converged": self.converged, "infeasible": self.infeasible}


def rate_function(target, smap: SkeletonMap, tol: float = 1e-9, max_iter: int = 20_000,
                  stall_window: int = 50, stall_ratio: float = 0.99) -> RateResult:
    """Least-energy control reproducing ``target`` (a trajectory or a terminal field).

    Returns I = +inf when the residual stops decreasing by at least 1% over
    ``stall_window`` iterations while still above ``tol``: the target is
    outside the range of the skeleton map.
    """
    g = np.asarray(getattr(target, "values", target), dtype=float)
    if g.ndim == 1:
        if g.shape != (smap.grid.n_cells,):
            raise ValueError("terminal target does not match the grid")
        A, AT, inner = smap.terminal, smap.terminal_adjoint, smap.inner_terminal
    else:
        if g.shape != smap.trajectory_shape:
            raise ValueError(f"target of shape {g.shape}, expected {smap.trajectory_shape}")
        if np.any(g[0] != 0):
            return RateResult(math.inf, np.zeros(smap.control_shape), math.nan, 0, False, True)
        return _invert_trajectory(g, smap, tol)

    x = np.zeros(smap.control_shape)
    r = g.copy()
    rr = inner(r, r)
    res = math.sqrt(rr)
    history = [res]
    if res <= tol:
        return RateResult(0.0, x, res, 0, True, False, history)
    p = AT(r)
    infeasible = False
    it = 0
    for it in range(1, max_iter + 1):
        pp = smap.inner_control(p, p)
        if pp <= 1e-300 or pp <= 1e-28 * rr:
            infeasible = True
            break
        alpha = rr / pp
        x = x + alpha * p
        r = r - alpha * A(p)
        rr_new = inner(r, r)
        res = math.sqrt(rr_new)
        history.append(res)
        if res <= tol:
            break
        if it > stall_window:
            if min(history[-stall_window:]) > stall_ratio * min(history[:-stall_window]):
                infeasible = True
                break
        p = AT(r) + (rr_new / rr) * p
        rr = rr_new
    # recompute the residual directly; the recursion drifts on long runs
    r_true = g - A(x)
    res = math.sqrt(inner(r_true, r_true))
    converged = res <= tol and not infeasible
    value = math.inf if infeasible else smap.energy(x)
    return RateResult(value, x, res, it, converged, infeasible, history)


def _invert_trajectory(g, smap: SkeletonMap, tol: float) -> RateResult:
    """Trajectory targets: the skeleton map is injective, so invert it cell by cell.

    h_j = G^+ (g_{j+1} - P g_j) / dt; the target is feasible iff re-applying the
    map reproduces it.
    """
    step = g[1:] - smap.prop.propagate(g[:-1], smap.dt)
    G = smap.spatial * smap.dt
    if smap.rule == "exact":
        G = smap.prop.cell_average(G.T, smap.dt).T
    rates = np.linalg.lstsq(G, step.T, rcond=None)[0].T
    r = g - smap.forward(rates)
    res = math.sqrt(smap.inner_trajectory(r, r))
    scale = max(1.0, math.sqrt(smap.inner_trajectory(g, g)))
    if res > tol * scale and res > 1e-10 * scale:
        return RateResult(math.inf, rates, res, 1, False, True, [res])
    return RateResult(smap.energy(rates), rates, res, 1, True, False, [res])


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True)
class EventSpec:
    """Super-level set {g : functional(g) >= threshold}."""

    functional: str = "terminal_l1_norm"
    threshold: float = 0.5

    def __post_init__(self):
        if self.functional not in ("terminal_l1_norm", "trajectory_l1l1_norm"):
            raise ValueError(f"unknown functional {self.functional!r}")
        if not math.isfinite(self.threshold) or self.threshold < 0:
            raise ValueError("threshold must be finite and non-negative")

    @property
    def terminal(self) -> bool:
        return self.functional == "terminal_l1_norm"

    def measure(self, values: np.ndarray, dt: float, dx: float) -> np.ndarray:
        """Functional of trajectories (..., n_times, N)."""
        if self.terminal:
            return dx * np.sum(np.abs(values[..., -1, :]), axis=-1)
        return l1l1_values(values, dt, dx)

    def contains(self, values, dt, dx):
        return self.measure(values, dt, dx) >= self.threshold


@dataclass
class EventRate:
    value: float
    target: np.ndarray | None
    rates: np.ndarray | None
    direction: str = ""


def direction_dictionary(smap: SkeletonMap) -> dict:
    """Per-mode controls: constant rate, and unit impulses at the first, middle and last cell."""
    M, K = smap.control_shape
    out = {}
    for k in range(K):
        if smap.noise.gammas[k] == 0:
            continue
        const = np.zeros((M, K))
        const[:, k] = 1.0
        out[f"mode{k + 1}:constant"] = const
        for j in sorted({0, M // 2, M - 1}):
            imp = np.zeros((M, K))
            imp[j, k] = 1.0 / smap.dt
            out[f"mode{k + 1}:impulse@{j}"] = imp
    return out


def rate_of_event(ev: EventSpec, smap: SkeletonMap, tol: float = 1e-10) -> EventRate:
    """inf of I over the event, by quadratic homogeneity along dictionary directions.

    For a direction d in the range of the skeleton map, the cheapest point of
    the event on the ray through d costs threshold^2 I(d) / functional(d)^2.
    """
    if ev.threshold == 0:
        return EventRate(0.0, np.zeros(smap.grid.n_cells if ev.terminal else smap.trajectory_shape),
                         np.zeros(smap.control_shape), "origin")
    best = EventRate(math.inf, None, None, "")
    for name, rates in direction_dictionary(smap).items():
        traj = smap.forward(rates)
        d = traj[-1] if ev.terminal else traj
        size = float(ev.measure(traj, smap.dt, smap.grid.dx))
        if size <= 1e-14:
            continue
        res = rate_function(d, smap, tol=tol * max(1.0, math.sqrt(smap.inner_terminal(d, d))
                                                   if ev.terminal else 1.0))
        if res.infeasible or not math.isfinite(res.value):
            continue
        ratio = res.value / size ** 2
        val = ev.threshold ** 2 * ratio
        if val < best.value:
            scale = ev.threshold / size
            best = EventRate(val, scale * d, scale * res.rates, name)
    return best


# ---------------------------------------------------------------------------
# condition (b): continuity of the skeleton map along weakly converging controls


def run_condition_b(smap: SkeletonMap, h: Control, m_values, amplitude: float = 1.0,
                    mode: int = 1, N: float | None = None) -> list:
    """Gaps ||X_{h_m} - X_h||_{L1L1} for h_m = h + amplitude sin(2 pi m t) e_mode.

    A final row with a constant-in-time perturbation of the same mean square
    is the non-null control case whose gap does not vanish.
    """
    base = smap.forward(h.rates)
    rows = []
    cases = [("oscillating", m, lambda t, m=m: amplitude * np.sin(2 * np.pi * m * t))
             for m in m_values]
    cases.append(("constant", 0, lambda t: amplitude / math.sqrt(2.0) * np.ones_like(t)))
    for kind, m, fn in cases:
        pert = Control.from_functions(h.t_end, h.n_steps, h.n_modes, {mode: fn})
        hm = h + pert
        if N is not None and not hm.in_ball(N):
            raise ValueError(f"perturbed control (m = {m}) leaves S_N with N = {N}")
        traj = smap.forward(hm.rates)
        gap = float(l1l1_values(traj - base, smap.dt, smap.grid.dx))
        rows.append({"kind": kind, "m": m, "gap": gap, "energy": hm.energy})
    return rows


# ---------------------------------------------------------------------------
# Monte Carlo on the controlled / rescaled equation


def skeleton_map(setup: Setup) -> SkeletonMap:
    """Skeleton map on the time grid of the controlled solver."""
    plan = setup.controlled_plan()
    return SkeletonMap(setup.grid, setup.noise, float(setup.flux.speed(1.0)), setup.cfg.t_end,
                       plan.n_steps, setup.cfg.viscosity)


def condition_a_distances(setup: Setup, eps: float, rates, keys) -> np.ndarray:
    """||Xbar^eps - Y^eps||_{L1L1} for each replicate key."""
    plan = setup.controlled_plan()
    incr = batch_increments(keys, plan.n_steps, setup.noise.n_modes, setup.cfg.t_end)
    ids = [k.replicate for k in keys]
    _, xbar = simulate_controlled(setup.grid, setup.flux, setup.noise, incr, eps, setup.scale,
                                  rates, setup.cfg, plan, ids)
    smap = skeleton_map(setup)
    y = smap.forward(rates)
    return l1l1_values(xbar - y[None], plan.dt, setup.grid.dx)


def mixture_log_weights(increments, shifts, lam: float, dt: float) -> np.ndarray:
    """log dP/dQ for paths whose P-increments are ``increments`` (R, M, K).

    Q is the equal mixture of Cameron-Martin shifts lam * s for s in shifts.
    """
    logs = []
    for s in shifts:
        lin = np.sum(increments * s[None], axis=(1, 2))
        logs.append(lam * lin - 0.5 * lam ** 2 * dt * float(np.sum(s * s)))
    logs = np.stack(logs, axis=0)
    top = np.max(logs, axis=0)
    log_mix = top + np.log(np.mean(np.exp(logs - top), axis=0))
    return -log_mix


def mdp_samples(setup: Setup, ev: EventSpec, eps: float, keys, shift=None) -> np.ndarray:
    """Per-replicate estimator values 1{X in F} * dP/dQ (weight 1 for plain MC).

    With a shift, replicate r is driven by the component (-1)^r of the
    symmetric mixture {+shift, -shift}.
    """
    plan = setup.controlled_plan()
    lam = setup.scale.lam(eps)
    incr = batch_increments(keys, plan.n_steps, setup.noise.n_modes, setup.cfg.t_end)
    ids = np.array([k.replicate for k in keys])
    if shift is None:
        _, x = simulate_controlled(setup.grid, setup.flux, setup.noise, incr, eps, setup.scale,
                                   None, setup.cfg, plan, ids)
        return ev.contains(x, plan.dt, setup.grid.dx).astype(float)
    shift = np.asarray(shift, dtype=float)
    signs = np.where(ids % 2 == 0, 1.0, -1.0)
    rates = signs[:, None, None] * shift[None]
    _, x = simulate_controlled(setup.grid, setup.flux, setup.noise, incr, eps, setup.scale,
                               rates, setup.cfg, plan, ids)
    p_incr = incr + lam * rates * plan.dt
    logw = mixture_log_weights(p_incr, [shift, -shift], lam, plan.dt)
    hit = ev.contains(x, plan.dt, setup.grid.dx)
    return np.where(hit, np.exp(logw), 0.0)


def normalized_log_probability(p: float, lam: float) -> float:
    """-lambda^-2 log p."""
    if p <= 0:
        return math.inf
    return -math.log(p) / lam ** 2 + 0.0


def _control_for(h_family, eps, shape):
    h = h_family(eps) if callable(h_family) else h_family
    if h is None:
        return np.zeros(shape)
    rates = np.asarray(getattr(h, "rates", h), dtype=float)
    if rates.shape != shape:
        raise ValueError(f"control of shape {rates.shape}, solver grid needs {shape}")
    return rates


def run_condition_a(setup: Setup, eps_grid, h_family=None, delta: float = 0.1,
                    replicates: int = 200, seed: int = 0, parallelism: int = 1,
                    N: float | None = None) -> list:
    """Empirical P(||Xbar^eps - Y^eps||_{L1L1} > delta) per eps (coupled paths across eps).

    ``h_family`` is None (zero control), a Control / rate array, or a callable
    eps -> Control.
    """
    plan = setup.controlled_plan()
    shape = (plan.n_steps, setup.noise.n_modes)
    eps_grid = [float(e) for e in eps_grid]
    controls = [_control_for(h_family, e, shape) for e in eps_grid]
    if N is not None:
        for e, r in zip(eps_grid, controls):
            if not Control(setup.cfg.t_end, r).in_ball(N):
                raise ValueError(f"control for eps = {e} leaves S_N with N = {N}")

    def closure(keys):
        return np.stack([condition_a_distances(setup, e, r, keys)
                         for e, r in zip(eps_grid, controls)], axis=1)

    stats = run_replicates(closure, replicates, seed, parallelism, "condition_a")
    rows = []
    for i, e in enumerate(eps_grid):
        d = stats.values[:, i]
        exceed = (d > delta).astype(float)
        p = float(np.mean(exceed))
        rows.append({"eps": e, "lambda": setup.scale.lam(e), "delta": float(delta),
                     "p_exceed": p, "stderr": math.sqrt(p * (1 - p) / replicates),
                     "mean_distance": float(stats.mean[i]),
                     "distance_stderr": float(stats.stderr[i]),
                     "energy": Control(setup.cfg.t_end, controls[i]).energy})
    return rows


def estimate_mdp_probability(setup: Setup, ev: EventSpec, eps_grid, replicates: int = 200,
                             seed: int = 0, shift=None, parallelism: int = 1,
                             rate: float | None = None) -> list:
    """Plain (shift None) or importance-sampled estimates of P(X^eps in F) per eps.

    Each row carries -lambda^-2 log P.  With zero hits the row reports the
    one-sided bound from P <= 3 / replicates (95% rule of three) and
    ``kind = "lower_bound"``.
    """
    eps_grid = [float(e) for e in eps_grid]
    if shift is not None:
        shift = np.asarray(getattr(shift, "rates", shift), dtype=float)
    method = "plain" if shift is None else "importance"

    def closure(keys):
        return np.stack([mdp_samples(setup, ev, e, keys, shift) for e in eps_grid], axis=1)

    stats = run_replicates(closure, replicates, seed, parallelism, f"mdp_{method}")
    rows = []
    for i, e in enumerate(eps_grid):
        lam = setup.scale.lam(e)
        w = stats.values[:, i]
        hits = int(np.count_nonzero(w))
        p = float(stats.mean[i])
        se = float(stats.stderr[i])
        if hits == 0:
            kind = "lower_bound"
            norm = normalized_log_probability(3.0 / replicates, lam)
            norm_se = math.nan
        else:
            kind = "estimate"
            norm = normalized_log_probability(p, lam)
            norm_se = se / (p * lam ** 2)
        rows.append({"eps": e, "lambda": lam, "method": method, "p_hat": p, "stderr": se,
                     "hits": hits, "normalized": norm, "normalized_stderr": norm_se,
                     "kind": kind, "rate": math.nan if rate is None else float(rate)})
    return rows


__all__ = [
    "SkeletonMap", "RateResult", "rate_function", "EventSpec", "EventRate", "rate_of_event",
    "direction_dictionary", "run_condition_b", "skeleton_map", "condition_a_distances",
    "mixture_log_weights", "mdp_samples", "normalized_log_probability",
    "run_condition_a", "estimate_mdp_probability",
]
