"""Domain types: torus grid, fields, flux, noise, deviation scale and controls.

Everything here is immutable after construction so the same objects can be
shared by concurrent replicate workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import polynomial as P

from .rng import StreamKey, normal_stream


class ModelError(ValueError):
    """Raised for malformed model parameters or inputs."""


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic mesh on the unit torus."""

    n_cells: int

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 8:
            raise ModelError(f"n_cells must be an integer >= 8, got {self.n_cells}")

    @property
    def dx(self) -> float:
        return 1.0 / self.n_cells

    @cached_property
    def cell_centers(self) -> np.ndarray:
        x = (np.arange(self.n_cells) + 0.5) / self.n_cells
        x.flags.writeable = False
        return x

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Integer wavenumbers m of the real FFT layout."""
        m = np.fft.rfftfreq(self.n_cells, d=1.0 / self.n_cells)
        m.flags.writeable = False
        return m

    def wrap(self, i):
        return np.mod(i, self.n_cells)

    @staticmethod
    def distance(x, y):
        d = np.abs(np.asarray(x) - np.asarray(y)) % 1.0
        return np.minimum(d, 1.0 - d)


@dataclass(frozen=True, eq=False)
class Field:
    """Cell averages of a scalar on a TorusGrid."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.n_cells,):
            raise ModelError(f"field has shape {v.shape}, expected ({self.grid.n_cells},)")
        if not np.all(np.isfinite(v)):
            raise ModelError("field contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: TorusGrid, c: float) -> "Field":
        return cls(grid, np.full(grid.n_cells, float(c)))

    @classmethod
    def from_function(cls, grid: TorusGrid, fn) -> "Field":
        return cls(grid, fn(grid.cell_centers))

    def __sub__(self, other: "Field") -> "Field":
        _check_same_grid(self, other)
        return Field(self.grid, self.values - other.values)

    def mass(self) -> float:
        return self.grid.dx * float(np.sum(self.values))


def _check_same_grid(u: Field, v: Field):
    if u.grid != v.grid:
        raise ModelError("fields live on different grids")


# ---------------------------------------------------------------------------
# flux


@dataclass(frozen=True, eq=False)
class FluxModel:
    """Polynomial flux A(xi) = sum_j c_j xi^j (ascending coefficients).

    ``p`` and ``C`` are the growth exponent and constant of the local
    Lipschitz bound |a(xi) - a(zeta)| <= C (1 + |xi|^{p-1} + |zeta|^{p-1}) |xi - zeta|.
    When not given they are derived from the coefficients.
    """

    coefficients: tuple
    kind: str = "polynomial"
    p: float | None = None
    C: float | None = None

    def __post_init__(self):
        c = tuple(float(x) for x in np.atleast_1d(self.coefficients))
        if len(c) == 0 or not all(math.isfinite(x) for x in c):
            raise ModelError("flux coefficients must be a non-empty finite sequence")
        object.__setattr__(self, "coefficients", c)
        curvature = P.polyder(np.array(c), 2) if len(c) > 2 else np.zeros(1)
        if self.p is None:
            object.__setattr__(self, "p", float(max(1, len(curvature))))
        if self.C is None:
            object.__setattr__(self, "C", float(np.sum(np.abs(curvature))))
        if self.p < 1 or self.C < 0:
            raise ModelError("need p >= 1 and C >= 0")

    @classmethod
    def burgers(cls) -> "FluxModel":
        return cls((0.0, 0.0, 0.5), kind="burgers")

    @classmethod
    def polynomial(cls, coefficients) -> "FluxModel":
        return cls(tuple(coefficients), kind="polynomial")

    @classmethod
    def linear(cls, speed: float) -> "FluxModel":
        return cls((0.0, float(speed)), kind="polynomial")

    @cached_property
    def _coef(self) -> np.ndarray:
        return np.array(self.coefficients)

    @cached_property
    def _dcoef(self) -> np.ndarray:
        return P.polyder(self._coef) if len(self._coef) > 1 else np.zeros(1)

    @cached_property
    def speed_roots(self) -> np.ndarray:
        """Real roots of a, i.e. the sonic points where the speed changes sign."""
        d = np.trim_zeros(self._dcoef, "b")
        if len(d) <= 1:
            return np.empty(0)
        r = P.polyroots(d)
        r = np.sort(r[np.abs(r.imag) < 1e-12].real)
        return r

    @property
    def is_linear(self) -> bool:
        return len(np.trim_zeros(self._coef[2:], "b")) == 0

    def flux(self, xi):
        return P.polyval(xi, self._coef)

    def speed(self, xi):
        return P.polyval(xi, self._dcoef)

    def abs_speed_integral(self, lo, hi):
        """Integral of |a| over [min(lo,hi), max(lo,hi)], exact for polynomials."""
        lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
        if self.speed_roots.size == 0:
            return np.abs(self.flux(hi) - self.flux(lo))
        pts = [lo] + [np.clip(r, lo, hi) for r in self.speed_roots] + [hi]
        total = 0.0
        prev = pts[0]
        for nxt in pts[1:]:
            total = total + np.abs(self.flux(nxt) - self.flux(prev))
            prev = nxt
        return total

    def minus_linear(self, c: float) -> "FluxModel":
        """Flux A(xi) - c xi, the residual seen in a frame moving at speed c."""
        coef = list(self.coefficients) + [0.0] * max(0, 2 - len(self.coefficients))
        coef[1] -= c
        return FluxModel(tuple(coef), kind="polynomial")

    def psi(self, eps: float, scale: "DeviationScale") -> "FluxModel":
        """Rescaled flux (A(mu xi + 1) - A(1)) / mu with mu = sqrt(eps) lambda(eps).

        Coefficients are expanded binomially so that the A(1) cancellation is
        exact and no 1/mu blow-up appears for small mu.
        """
        _check_eps(eps)
        mu = scale.mu(eps)
        c = self._coef
        n = len(c)
        out = np.zeros(max(n, 2))
        for j in range(1, n):
            out[j] = mu ** (j - 1) * sum(c[i] * math.comb(i, j) for i in range(j, n))
        return FluxModel(tuple(out), kind="polynomial")


def eval_flux(flux: FluxModel, xi):
    return flux.flux(xi)


def eval_flux_derivative(flux: FluxModel, xi):
    return flux.speed(xi)


def _check_eps(eps):
    if not (0.0 < eps < 1.0):
        raise ModelError(f"eps must lie in (0, 1), got {eps}")


def psi_transform(flux: FluxModel, eps: float, scale: "DeviationScale", xi):
    return flux.psi(eps, scale).flux(xi)


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseModel:
    """Truncated noise family g_k(x, u) = gamma_k phi_k(x) sigma(u).

    Mode k = 1 is the constant function; k = 2m, 2m + 1 are sqrt(2) cos and
    sqrt(2) sin of 2 pi m x.  ``drop_constant`` zeroes the k = 1 amplitude,
    giving a noise with zero spatial mean.
    """

    n_modes: int = 8
    gamma0: float = 0.25
    decay: float = 2.0
    state_factor: str = "linear"
    drop_constant: bool = False

    def __post_init__(self):
        if int(self.n_modes) != self.n_modes or self.n_modes < 0:
            raise ModelError("n_modes must be a non-negative integer")
        if self.state_factor not in ("additive", "linear"):
            raise ModelError(f"unknown state_factor {self.state_factor!r}")
        if self.gamma0 < 0 or self.decay <= 0.5:
            raise ModelError("need gamma0 >= 0 and decay > 1/2 for square summability")

    @cached_property
    def gammas(self) -> np.ndarray:
        k = np.arange(1, self.n_modes + 1, dtype=float)
        g = self.gamma0 * k ** (-self.decay)
        if self.drop_constant and self.n_modes:
            g[0] = 0.0
        g.flags.writeable = False
        return g

    @staticmethod
    def wavenumber(k: int) -> int:
        return k // 2

    def basis(self, k: int, x):
        self._check_mode(k)
        x = np.asarray(x, dtype=float)
        if k == 1:
            return np.ones_like(x)
        m = k // 2
        trig = np.cos if k % 2 == 0 else np.sin
        return math.sqrt(2.0) * trig(2.0 * np.pi * m * x)

    def _check_mode(self, k):
        if not (1 <= k <= self.n_modes):
            raise ModelError(f"mode index {k} outside 1..{self.n_modes}")

    def sigma(self, u):
        u = np.asarray(u, dtype=float)
        return np.ones_like(u) if self.state_factor == "additive" else u

    @property
    def sigma_lipschitz(self) -> float:
        return 0.0 if self.state_factor == "additive" else 1.0

    def eval(self, k: int, x, u):
        """g_k(x, u)."""
        self._check_mode(k)
        return self.gammas[k - 1] * self.basis(k, x) * self.sigma(u)

    def g_squared(self, x, u):
        """G^2(x, u) = sum_k g_k(x, u)^2."""
        x = np.asarray(x, dtype=float)
        total = np.zeros(np.broadcast(x, np.asarray(u)).shape)
        for k in range(1, self.n_modes + 1):
            total = total + self.eval(k, x, u) ** 2
        return total

    def spatial_matrix(self, grid: TorusGrid) -> np.ndarray:
        """(n_cells, K) matrix of gamma_k phi_k at cell centres."""
        x = grid.cell_centers
        cols = [self.gammas[k - 1] * self.basis(k, x) for k in range(1, self.n_modes + 1)]
        if not cols:
            return np.zeros((grid.n_cells, 0))
        return np.stack(cols, axis=1)

    @property
    def sum_gamma_sq(self) -> float:
        return float(np.sum(self.gammas ** 2))

    @property
    def D0(self) -> float:
        return 4.0 * self.sum_gamma_sq

    @property
    def D1(self) -> float:
        if self.n_modes == 0:
            return 0.0
        gmax = float(np.max(self.gammas ** 2))
        return 8.0 * np.pi ** 2 * self.n_modes ** 2 * gmax * (1.0 + self.sigma_lipschitz ** 2)


def noise_eval(noise: NoiseModel, k: int, x, u):
    return noise.eval(k, x, u)


@dataclass
class HypothesisReport:
    D0_hat: float
    D1_hat: float
    gamma_hat: float
    D0: float
    D1: float
    C: float
    sample_count: int

    @property
    def passed(self) -> bool:
        return self.D0_hat <= self.D0 and self.D1_hat <= self.D1 and self.gamma_hat <= self.C

    def as_dict(self) -> dict:
        return {
            "D0_hat": self.D0_hat, "D1_hat": self.D1_hat, "Gamma_hat": self.gamma_hat,
            "D0": self.D0, "D1": self.D1, "C": self.C,
            "sample_count": self.sample_count, "pass": self.passed,
        }


def verify_hypothesis_bounds(noise: NoiseModel, flux: FluxModel, sample_count: int = 10_000,
                             box: float = 2.0, seed: int = 0) -> HypothesisReport:
    """Empirical sup of the three growth/Lipschitz ratios over a sampling box.

    States u, v, xi, zeta are drawn uniformly from [-box, box], positions from
    the torus.  Failure is a report outcome, never an exception.
    """
    if sample_count < 1000:
        raise ModelError("sample_count must be >= 1000")
    rng = np.random.default_rng(seed)
    x, y = rng.random(sample_count), rng.random(sample_count)
    u, v, xi, zeta = (rng.uniform(-box, box, sample_count) for _ in range(4))
    # a few near-diagonal pairs probe the local Lipschitz ratio
    near = sample_count // 4
    y[:near] = (x[:near] + rng.normal(0, 1e-3, near)) % 1.0
    v[:near] = u[:near] + rng.normal(0, 1e-3, near)
    zeta[:near] = xi[:near] + rng.normal(0, 1e-3, near)

    d0 = float(np.max(noise.g_squared(x, u) / (1.0 + u ** 2))) if noise.n_modes else 0.0
    if noise.n_modes:
        diff = np.zeros(sample_count)
        for k in range(1, noise.n_modes + 1):
            diff += (noise.eval(k, x, u) - noise.eval(k, y, v)) ** 2
        denom = TorusGrid.distance(x, y) ** 2 + (u - v) ** 2
        ok = denom > 0
        d1 = float(np.max(diff[ok] / denom[ok])) if ok.any() else 0.0
    else:
        d1 = 0.0
    pm1 = flux.p - 1.0
    dz = np.abs(xi - zeta)
    ok = dz > 0
    gam = np.abs(flux.speed(xi) - flux.speed(zeta))[ok] / (
        (1.0 + np.abs(xi[ok]) ** pm1 + np.abs(zeta[ok]) ** pm1) * dz[ok])
    gamma_hat = float(np.max(gam)) if gam.size else 0.0
    return HypothesisReport(d0, d1, gamma_hat, noise.D0, noise.D1, flux.C, sample_count)


# ---------------------------------------------------------------------------
# deviation scale, controls, Wiener paths


@dataclass(frozen=True)
class DeviationScale:
    """lambda(eps) = eps^-alpha with alpha in (0, 1/2)."""

    alpha: float = 0.25

    def __post_init__(self):
        if not (0.0 < self.alpha < 0.5):
            raise ModelError(f"alpha must lie in (0, 1/2), got {self.alpha}")

    def lam(self, eps: float) -> float:
        return eps ** (-self.alpha)

    def mu(self, eps: float) -> float:
        """sqrt(eps) * lambda(eps)."""
        return eps ** (0.5 - self.alpha)


@dataclass(frozen=True, eq=False)
class Control:
    """Cameron-Martin control given by piecewise-constant rates on a uniform time grid.

    ``rates[j, k]`` is the value of dh^k/dt on [t_j, t_{j+1}).
    """

    t_end: float
    rates: np.ndarray

    def __post_init__(self):
        r = np.array(self.rates, dtype=float)
        if r.ndim != 2:
            raise ModelError("control rates must be a (n_steps, n_modes) array")
        if not np.all(np.isfinite(r)):
            raise ModelError("control rates must be finite")
        r.flags.writeable = False
        object.__setattr__(self, "rates", r)

    @property
    def n_steps(self) -> int:
        return self.rates.shape[0]

    @property
    def n_modes(self) -> int:
        return self.rates.shape[1]

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.n_steps + 1)

    @property
    def energy(self) -> float:
        return 0.5 * self.dt * float(np.sum(self.rates ** 2))

    def in_ball(self, N: float) -> bool:
        """Membership in S_N: int_0^T |h'|^2 <= N."""
        return 2.0 * self.energy <= N

    def __add__(self, other: "Control") -> "Control":
        if other.rates.shape != self.rates.shape or other.t_end != self.t_end:
            raise ModelError("controls live on different grids")
        return Control(self.t_end, self.rates + other.rates)

    def __mul__(self, c: float) -> "Control":
        return Control(self.t_end, c * self.rates)

    __rmul__ = __mul__

    @classmethod
    def zero(cls, t_end: float, n_steps: int, n_modes: int) -> "Control":
        return cls(t_end, np.zeros((n_steps, n_modes)))

    @classmethod
    def from_functions(cls, t_end: float, n_steps: int, n_modes: int, fns: dict,
                       quad_points: int = 6) -> "Control":
        """Cell averages of rate functions {mode k: f(t)} by Gauss-Legendre quadrature."""
        nodes, weights = np.polynomial.legendre.leggauss(quad_points)
        dt = t_end / n_steps
        left = np.arange(n_steps) * dt
        tq = left[:, None] + 0.5 * dt * (nodes[None, :] + 1.0)
        rates = np.zeros((n_steps, n_modes))
        for k, f in fns.items():
            if not (1 <= k <= n_modes):
                raise ModelError(f"mode index {k} outside 1..{n_modes}")
            rates[:, k - 1] = 0.5 * np.sum(weights[None, :] * f(tq), axis=1)
        return cls(t_end, rates)


@dataclass(frozen=True)
class WienerPath:
    """Brownian increments for K modes on a uniform grid, regenerated from a key.

    Each mode k has its own counter-based stream, so the increments of mode k
    do not depend on how many other modes are simulated.
    """

    key: StreamKey
    n_steps: int
    n_modes: int
    t_end: float

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @property
    def increments(self) -> np.ndarray:
        """(n_steps, n_modes) array of Delta beta_k(t_j) ~ N(0, dt)."""
        out = np.empty((self.n_steps, self.n_modes))
        sd = math.sqrt(self.dt)
        for k in range(self.n_modes):
            out[:, k] = sd * normal_stream(self.key.for_mode(k + 1), self.n_steps)
        return out


def batch_increments(keys, n_steps: int, n_modes: int, t_end: float) -> np.ndarray:
    """Stack the increments of several paths into (R, n_steps, n_modes)."""
    out = np.empty((len(keys), n_steps, n_modes))
    for r, key in enumerate(keys):
        out[r] = WienerPath(key, n_steps, n_modes, t_end).increments
    return out


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Field samples at increasing times starting at 0."""

    grid: TorusGrid
    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.times), self.grid.n_cells):
            raise ValueError("trajectory values do not match times x cells")
        if len(self.times) and (self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0)):
            raise ValueError("times must start at 0 and increase strictly")

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def at(self, j: int):
        return Field(self.grid, self.values[j])


def output_indices(n_steps: int, stride: int) -> np.ndarray:
    idx = np.arange(0, n_steps + 1, max(1, int(stride)))
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx



# ---------------------------------------------------------------------------
# norms


def lp_norm(f, p: float = 1.0, dx: float | None = None) -> float:
    """(dx sum |f_i|^p)^(1/p) for a Field, or for raw values with explicit dx."""
    if p < 1:
        raise ModelError("p must be >= 1")
    if isinstance(f, Field):
        vals, dx = f.values, f.grid.dx
    else:
        vals = np.asarray(f, dtype=float)
        if dx is None:
            dx = 1.0 / vals.shape[-1]
    if not np.all(np.isfinite(vals)):
        raise ModelError("non-finite field")
    if p == 1:
        return float(dx * np.sum(np.abs(vals)))
    return float((dx * np.sum(np.abs(vals) ** p)) ** (1.0 / p))


def l1l1_values(values: np.ndarray, dt: float, dx: float) -> np.ndarray:
    """Left-endpoint L1([0,T];L1) norm along the last two axes (time, space).

    ``values`` has shape (..., n_times, n_cells) with n_times = n_steps + 1;
    the terminal sample is not weighted.
    """
    return dt * dx * np.sum(np.abs(values[..., :-1, :]), axis=(-2, -1))


def traj_l1l1(traj) -> float:
    dts = np.diff(traj.times)
    vals = np.abs(traj.values[:-1])
    return float(np.sum(dts * traj.grid.dx * np.sum(vals, axis=1)))


def kinetic_bracket(u, v):
    """Integral over xi of 1{u > xi} (1 - 1{v > xi}), i.e. the length of [v, u)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.where(u > v, u - v, 0.0)


def kinetic_distance(u: Field, v: Field) -> float:
    """L1 distance computed from the kinetic functions 1{u > xi} and 1{v > xi}."""
    _check_same_grid(u, v)
    per_cell = kinetic_bracket(u.values, v.values) + kinetic_bracket(v.values, u.values)
    return float(u.grid.dx * np.sum(per_cell))


__all__ = [
    "ModelError", "TorusGrid", "Field", "FluxModel", "NoiseModel", "DeviationScale",
    "Control", "WienerPath", "HypothesisReport", "eval_flux", "eval_flux_derivative",
    "psi_transform", "noise_eval", "verify_hypothesis_bounds", "lp_norm", "traj_l1l1",
    "l1l1_values", "Trajectory", "output_indices", "kinetic_distance", "kinetic_bracket", "batch_increments",
]
