"""Experiment drivers and statistics for the fluctuation (CLT) side.

All drivers share Brownian increments across the eps grid (and across the
processes being compared) for a given replicate, so gaps are pathwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .harness import run_replicates
from .limits import linear_spde_batch
from .model import batch_increments, l1l1_values
from .solvers import Setup, simulate_spde


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    ci_lo: float
    ci_hi: float
    r2: float
    n: int

    def as_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "ci_lo": self.ci_lo,
                "ci_hi": self.ci_hi, "r2": self.r2, "n": self.n}


def fit_loglog_slope(points, level: float = 0.95) -> SlopeFit:
    """Weighted least squares of log(estimate) on log(eps).

    ``points`` holds (eps, estimate, stderr) triples.  Weights are the inverse
    variances of log(estimate) by the delta method, falling back to equal
    weights when no usable standard error is given.
    """
    pts = [tuple(p) + (0.0,) * (3 - len(p)) for p in points]
    if len(pts) < 3:
        raise ValueError("need at least 3 points")
    eps = np.array([p[0] for p in pts], dtype=float)
    est = np.array([p[1] for p in pts], dtype=float)
    se = np.array([p[2] for p in pts], dtype=float)
    if np.any(eps <= 0) or np.any(~np.isfinite(eps)):
        raise ValueError("eps values must be positive")
    if len(np.unique(eps)) != len(eps):
        raise ValueError("duplicate eps values")
    if np.any(~(est > 0)) or np.any(~np.isfinite(est)):
        raise ValueError("estimates must be positive and finite")
    x, y = np.log(eps), np.log(est)
    rel = se / est
    w = 1.0 / rel ** 2 if np.all(rel > 0) and np.all(np.isfinite(rel)) else np.ones_like(x)
    w = w / w.sum()
    xm, ym = np.sum(w * x), np.sum(w * y)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = float(np.sum(w * (x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    n = len(x)
    ss_res = float(np.sum(w * resid ** 2))
    ss_tot = float(np.sum(w * (y - ym) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    if n > 2:
        # w is normalised, so scale by the effective sample size
        s2 = ss_res * n / (n - 2)
        half = float(sps.t.ppf(0.5 + level / 2, n - 2)) * math.sqrt(s2 / (n * sxx))
    else:
        half = math.inf
    return SlopeFit(slope, intercept, slope - half, slope + half, r2, n)


def _check_grid(eps_grid, minimum=2):
    eps = [float(e) for e in eps_grid]
    if len(eps) < minimum:
        raise ValueError(f"need at least {minimum} eps values")
    if any(not (0 < e < 1) for e in eps):
        raise ValueError("eps values must lie in (0, 1)")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("eps grid must be strictly decreasing")
    return eps


def _paths(setup: Setup, keys, n_steps):
    return batch_increments(keys, n_steps, setup.noise.n_modes, setup.cfg.t_end)


def _fluctuation(setup, cfg, incr, eps, plan, ids):
    """v = (u - 1) / sqrt(eps) for a batch of paths."""
    _, u = simulate_spde(setup.grid, np.ones(setup.grid.n_cells), setup.flux, setup.noise, incr,
                         eps, cfg, plan, ids)
    return (u - 1.0) / math.sqrt(eps)


def _linear_limit(setup, incr, eta, plan, stride):
    # endpoint rule: the pathwise limit of the split scheme on the same time grid
    return linear_spde_batch(setup.grid, setup.noise, float(setup.flux.speed(1.0)), incr,
                             plan.n_steps * plan.dt, eta, stride, "endpoint")


def decreasing_within(values, errors, k: float = 2.0) -> bool:
    """Each value exceeds its predecessor by at most k combined standard errors."""
    return all(b <= a + k * math.hypot(sa, sb)
               for a, b, sa, sb in zip(values, values[1:], errors, errors[1:]))


# ---------------------------------------------------------------------------
# moment scaling


@dataclass
class ScalingReport:
    q: float
    eta: float
    eps: list
    estimates: list
    stderrs: list
    fit: SlopeFit | None
    degenerate: bool = False

    @property
    def slope(self) -> float:
        return self.fit.slope if self.fit else math.nan

    @property
    def target(self) -> float:
        return self.q / 2

    def rows(self) -> list:
        return [{"eps": e, "estimate": m, "stderr": s}
                for e, m, s in zip(self.eps, self.estimates, self.stderrs)]

    def as_dict(self) -> dict:
        fit = self.fit.as_dict() if self.fit else {"slope": math.nan, "ci_lo": math.nan,
                                                   "ci_hi": math.nan, "r2": math.nan}
        return {"q": self.q, "eta": self.eta, "target_slope": self.target,
                "degenerate": self.degenerate, "rows": self.rows(), **fit}


def run_scaling_experiment(setup: Setup, q: float = 2.0, eps_grid=(1e-1, 1e-2, 1e-3, 1e-4),
                           eta: float = 0.01, replicates: int = 200, seed: int = 0,
                           parallelism: int = 1) -> ScalingReport:
    """MC estimate of E||u^{eps,eta} - 1||^q_{L^q L^q} per eps and its log-log slope."""
    if q < 2:
        raise ValueError("q must be at least 2")
    eps = _check_grid(eps_grid, 4)
    cfg = setup.cfg.with_(viscosity=eta)
    plan = setup.plan(cfg)

    def closure(keys):
        incr = _paths(setup, keys, plan.n_steps)
        ids = [k.replicate for k in keys]
        cols = []
        for e in eps:
            _, u = simulate_spde(setup.grid, np.ones(setup.grid.n_cells), setup.flux,
                                 setup.noise, incr, e, cfg, plan, ids)
            dev = np.abs(u - 1.0) ** q
            dt = plan.dt * cfg.output_stride
            cols.append(dt * setup.grid.dx * np.sum(dev[:, :-1], axis=(1, 2)))
        return np.stack(cols, axis=1)

    st = run_replicates(closure, replicates, seed, parallelism, "scaling")
    means = [float(m) for m in st.mean]
    errs = [float(s) for s in st.stderr]
    if all(m == 0 for m in means):
        return ScalingReport(q, eta, eps, means, errs, None, True)
    fit = fit_loglog_slope(list(zip(eps, means, errs)))
    return ScalingReport(q, eta, eps, means, errs, fit)


# ---------------------------------------------------------------------------
# viscous gaps


@dataclass
class ViscousGapTable:
    rows: list
    sup: list

    def as_dict(self) -> dict:
        return {"rows": self.rows, "sup_over_eps": self.sup}


def run_viscous_gap(setup: Setup, eps_grid=(1e-1, 1e-2, 1e-3), eta_grid=(0.1, 0.03, 0.01),
                    replicates: int = 200, seed: int = 0, parallelism: int = 1) -> ViscousGapTable:
    """Coupled E||v^eps - v^{eps,eta}||_{L1L1} and E||u1^eta - u1||_{L1L1}.

    The inviscid reference v^eps is the scheme with zero viscosity on the same
    grid and time steps.
    """
    eps = _check_grid(eps_grid, 1)
    etas = [float(h) for h in eta_grid]
    if any(h < 0 for h in etas):
        raise ValueError("viscosities must be non-negative")
    plan = setup.plan()
    stride = setup.cfg.output_stride
    dt = plan.dt * stride
    dx = setup.grid.dx

    def closure(keys):
        incr = _paths(setup, keys, plan.n_steps)
        ids = [k.replicate for k in keys]
        base_lin = _linear_limit(setup, incr, 0.0, plan, stride)
        cols = []
        refs = {e: _fluctuation(setup, setup.cfg.with_(viscosity=0.0), incr, e, plan, ids)
                for e in eps}
        for h in etas:
            cfg = setup.cfg.with_(viscosity=h)
            lin = _linear_limit(setup, incr, h, plan, stride)
            cols.append(l1l1_values(lin - base_lin, dt, dx))
            for e in eps:
                v = _fluctuation(setup, cfg, incr, e, plan, ids)
                cols.append(l1l1_values(v - refs[e], dt, dx))
        return np.stack(cols, axis=1)

    st = run_replicates(closure, replicates, seed, parallelism, "viscous_gap")
    rows, sup = [], []
    c = 0
    for h in etas:
        lin_m, lin_s = float(st.mean[c]), float(st.stderr[c])
        c += 1
        best = None
        for e in eps:
            row = {"eta": h, "eps": e, "nonlinear_gap": float(st.mean[c]),
                   "nonlinear_stderr": float(st.stderr[c]),
                   "linear_gap": lin_m, "linear_stderr": lin_s}
            rows.append(row)
            if best is None or row["nonlinear_gap"] > best["nonlinear_gap"]:
                best = row
            c += 1
        sup.append({"eta": h, "sup_nonlinear_gap": best["nonlinear_gap"],
                    "sup_nonlinear_stderr": best["nonlinear_stderr"], "argmax_eps": best["eps"],
                    "linear_gap": lin_m, "linear_stderr": lin_s})
    return ViscousGapTable(rows, sup)


@dataclass
class HGapReport:
    eta: float
    rows: list
    fit: SlopeFit | None

    def as_dict(self) -> dict:
        out = {"eta": self.eta, "rows": self.rows}
        if self.fit:
            out.update(self.fit.as_dict())
        return out


def run_h_gap(setup: Setup, eta: float = 0.05, eps_grid=(1e-1, 1e-2, 1e-3),
              replicates: int = 200, seed: int = 0, parallelism: int = 1) -> HGapReport:
    """sup_t E||v^{eps,eta}(t) - u1^eta(t)||^2_{L2} per eps, with its log-log slope."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    eps = _check_grid(eps_grid, 1)
    cfg = setup.cfg.with_(viscosity=eta)
    plan = setup.plan(cfg)
    stride = cfg.output_stride
    dx = setup.grid.dx

    def closure(keys):
        incr = _paths(setup, keys, plan.n_steps)
        ids = [k.replicate for k in keys]
        lin = _linear_limit(setup, incr, eta, plan, stride)
        cols = [dx * np.sum((_fluctuation(setup, cfg, incr, e, plan, ids) - lin) ** 2, axis=-1)
                for e in eps]
        return np.stack(cols, axis=1)  # (n, n_eps, n_times)

    st = run_replicates(closure, replicates, seed, parallelism, "h_gap")
    rows = []
    for i, e in enumerate(eps):
        j = int(np.argmax(st.mean[i]))
        rows.append({"eps": e, "sup_gap": float(st.mean[i, j]), "stderr": float(st.stderr[i, j]),
                     "argmax_t": float(j * plan.dt * stride)})
    fit = None
    if len(eps) >= 3 and all(r["sup_gap"] > 0 for r in rows):
        fit = fit_loglog_slope([(r["eps"], r["sup_gap"], r["stderr"]) for r in rows])
    return HGapReport(eta, rows, fit)


# ---------------------------------------------------------------------------
# central limit


@dataclass
class CltReport:
    eps: list
    estimates: list
    stderrs: list
    limit_scale: float
    limit_scale_stderr: float
    companions: dict = field(default_factory=dict)

    @property
    def decreasing(self) -> bool:
        return decreasing_within(self.estimates, self.stderrs)

    @property
    def reduction(self) -> float:
        return self.estimates[-1] / self.estimates[0] if self.estimates[0] > 0 else math.nan

    def rows(self) -> list:
        out = []
        for i, e in enumerate(self.eps):
            row = {"eps": e, "estimate": self.estimates[i], "stderr": self.stderrs[i]}
            for h, (m, s) in sorted(self.companions.items()):
                row[f"gap_eta_{h!r}"] = m[i]
                row[f"stderr_eta_{h!r}"] = s[i]
            out.append(row)
        return out

    def as_dict(self) -> dict:
        return {"rows": self.rows(), "limit_scale": self.limit_scale,
                "limit_scale_stderr": self.limit_scale_stderr, "decreasing": self.decreasing,
                "reduction": self.reduction}


def run_clt_experiment(setup: Setup, eps_grid=(1e-1, 1e-2, 1e-3, 1e-4), replicates: int = 200,
                       seed: int = 0, parallelism: int = 1, companion_etas=()) -> CltReport:
    """Coupled E||v^eps - u1||_{L1L1}; companions give the same gap at positive viscosity."""
    eps = _check_grid(eps_grid, 1)
    etas = [float(h) for h in companion_etas]
    cfg0 = setup.cfg.with_(viscosity=0.0)
    plan = setup.plan(cfg0)
    stride = cfg0.output_stride
    dt, dx = plan.dt * stride, setup.grid.dx

    def closure(keys):
        incr = _paths(setup, keys, plan.n_steps)
        ids = [k.replicate for k in keys]
        lin = _linear_limit(setup, incr, 0.0, plan, stride)
        cols = [l1l1_values(lin, dt, dx)]
        for e in eps:
            cols.append(l1l1_values(_fluctuation(setup, cfg0, incr, e, plan, ids) - lin, dt, dx))
        for h in etas:
            cfg = setup.cfg.with_(viscosity=h)
            lin_h = _linear_limit(setup, incr, h, plan, stride)
            for e in eps:
                v = _fluctuation(setup, cfg, incr, e, plan, ids)
                cols.append(l1l1_values(v - lin_h, dt, dx))
        return np.stack(cols, axis=1)

    st = run_replicates(closure, replicates, seed, parallelism, "clt")
    n = len(eps)
    comp = {}
    for i, h in enumerate(etas):
        sl = slice(1 + n * (i + 1), 1 + n * (i + 2))
        comp[h] = ([float(v) for v in st.mean[sl]], [float(v) for v in st.stderr[sl]])
    return CltReport(eps, [float(v) for v in st.mean[1:1 + n]],
                     [float(v) for v in st.stderr[1:1 + n]],
                     float(st.mean[0]), float(st.stderr[0]), comp)


def ito_isometry_check(setup: Setup, t: float = 0.5, replicates: int = 10_000, seed: int = 0,
                       parallelism: int = 1) -> dict:
    """E||u1(t)||^2_{L2} against t * sum_k ||g_k(., 1)||^2_{L2}."""
    n_steps = setup.plan(setup.cfg.with_(viscosity=0.0, t_end=t)).n_steps
    dx = setup.grid.dx

    def closure(keys):
        incr = batch_increments(keys, n_steps, setup.noise.n_modes, t)
        vals = linear_spde_batch(setup.grid, setup.noise, float(setup.flux.speed(1.0)), incr, t)
        return dx * np.sum(vals[:, -1] ** 2, axis=-1)[:, None]

    st = run_replicates(closure, replicates, seed, parallelism, "ito_isometry", chunk=500)
    x = setup.grid.cell_centers
    exact = t * sum(dx * float(np.sum(setup.noise.eval(k, x, 1.0) ** 2))
                    for k in range(1, setup.noise.n_modes + 1))
    est = float(st.mean[0])
    return {"t": t, "estimate": est, "stderr": float(st.stderr[0]), "exact": exact,
            "relative_error": abs(est - exact) / exact if exact > 0 else math.nan}


__all__ = [
    "SlopeFit", "fit_loglog_slope", "ScalingReport", "run_scaling_experiment", "ViscousGapTable",
    "run_viscous_gap", "HGapReport", "run_h_gap", "CltReport", "run_clt_experiment",
    "ito_isometry_check", "decreasing_within",
]
