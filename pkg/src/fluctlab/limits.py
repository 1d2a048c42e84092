"""Exact mode-by-mode solvers for the linear limit equations.

On the torus with background state 1 the CLT limit, its viscous version and
the skeleton equation are constant-coefficient transport-diffusion equations
with additive forcing.  They are solved here by one incremental convolution
engine: propagate the accumulated state over a time cell, then add the new
forcing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Control, NoiseModel, TorusGrid, Trajectory, WienerPath, output_indices


SHIFT_TOL = 1e-9


def integer_shift(speed: float, tau: float, dx: float):
    """Number of cells travelled in time tau, or None if not a whole number."""
    s = speed * tau / dx
    r = round(s)
    return int(r) if abs(s - r) <= SHIFT_TOL else None


def heat_multiplier(grid: TorusGrid, eta: float, tau: float) -> np.ndarray:
    return np.exp(-eta * (2.0 * np.pi * grid.wavenumbers) ** 2 * tau)


def apply_heat(u: np.ndarray, mult: np.ndarray) -> np.ndarray:
    """Apply a real Fourier multiplier row-wise, leaving constant rows untouched.

    Constant rows are skipped so that constant states stay bitwise constant.
    """
    u = np.array(u, dtype=float, copy=True)
    flat = u.reshape(-1, u.shape[-1])
    live = np.ptp(flat, axis=-1) > 0
    if live.any():
        flat[live] = np.fft.irfft(np.fft.rfft(flat[live], axis=-1) * mult, n=u.shape[-1], axis=-1)
    return flat.reshape(u.shape)


@dataclass(frozen=True)
class SpectralPropagator:
    """Solution operator of f_t + speed f_x = eta f_xx on the grid."""

    grid: TorusGrid
    speed: float
    eta: float = 0.0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("viscosity must be non-negative")

    def multiplier(self, tau: float) -> np.ndarray:
        w = 2.0 * np.pi * self.grid.wavenumbers
        return np.exp(-self.eta * w ** 2 * tau) * np.exp(-1j * w * self.speed * tau)

    def _heat(self, tau):
        key = ("heat", tau)
        if key not in self._cache:
            self._cache[key] = heat_multiplier(self.grid, self.eta, tau)
        return self._cache[key]

    def propagate(self, f, tau: float) -> np.ndarray:
        """Advance values (any leading batch shape) by time tau >= 0.

        A fractional shift cannot be represented on the real Nyquist mode of
        an even grid; that mode keeps only the cosine of its phase.
        """
        if tau < 0:
            raise ValueError("tau must be non-negative")
        vals = np.asarray(f.values if hasattr(f, "values") else f, dtype=float)
        if tau == 0:
            return vals.copy()
        s = integer_shift(self.speed, tau, self.grid.dx)
        if s is not None:
            out = np.roll(vals, s, axis=-1)
            if self.eta > 0:
                out = apply_heat(out, self._heat(tau))
            return out
        n = vals.shape[-1]
        return np.fft.irfft(np.fft.rfft(vals, axis=-1) * self.multiplier(tau), n=n, axis=-1)

    def cell_average_multiplier(self, tau: float) -> np.ndarray:
        """Multiplier of (1/tau) int_0^tau P(s) ds."""
        w = 2.0 * np.pi * self.grid.wavenumbers
        z = self.eta * w ** 2 + 1j * w * self.speed
        out = np.ones_like(z)
        nz = np.abs(z * tau) > 1e-12
        out[nz] = -np.expm1(-z[nz] * tau) / (z[nz] * tau)
        return out

    def cell_average(self, f, tau: float) -> np.ndarray:
        """Time average of the propagated field over [0, tau]."""
        vals = np.asarray(f.values if hasattr(f, "values") else f, dtype=float)
        if tau <= 0:
            return vals.copy()
        key = ("avg", tau)
        if key not in self._cache:
            self._cache[key] = self.cell_average_multiplier(tau)
        n = vals.shape[-1]
        return np.fft.irfft(np.fft.rfft(vals, axis=-1) * self._cache[key], n=n, axis=-1)

    def adjoint(self) -> "SpectralPropagator":
        """Adjoint with respect to the dx-weighted inner product (reversed transport)."""
        return SpectralPropagator(self.grid, -self.speed, self.eta)


def propagate(f, tau: float, prop: SpectralPropagator):
    return prop.propagate(f, tau)


RULES = ("exact", "endpoint")


def convolve(prop: SpectralPropagator, increments: np.ndarray, spatial: np.ndarray,
             dt: float, stride: int = 1, rule: str = "exact") -> np.ndarray:
    """Incremental convolution X_{j+1} = P_dt X_j + B (spatial @ increments_j), X_0 = 0.

    With ``rule="exact"`` B is the time average of P over the cell, so a
    forcing spread uniformly over each time cell is integrated exactly; with
    ``rule="endpoint"`` B is the identity (forcing enters at the end of the
    step, as in the finite-volume scheme).  ``increments`` has shape
    (R, M, K), ``spatial`` is (N, K).  Returns (R, n_out, N) samples at the
    strided output steps.
    """
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}")
    incr = np.asarray(increments, dtype=float)
    if incr.ndim != 3 or incr.shape[2] != spatial.shape[1]:
        raise ValueError(f"increments of shape {incr.shape} do not match {spatial.shape[1]} modes")
    R, M, K = incr.shape
    N = spatial.shape[0]
    keep = output_indices(M, stride)
    out = np.zeros((R, len(keep), N))
    X = np.zeros((R, N))
    slot = 1
    for j in range(M):
        F = np.zeros((R, N))
        for k in range(K):
            F = F + incr[:, j, k, None] * spatial[None, :, k]
        if rule == "exact":
            F = prop.cell_average(F, dt)
        X = prop.propagate(X, dt) + F
        if slot < len(keep) and keep[slot] == j + 1:
            out[:, slot] = X
            slot += 1
    return out


def linear_spde_batch(grid: TorusGrid, noise: NoiseModel, speed: float, increments: np.ndarray,
                      t_end: float, eta: float = 0.0, stride: int = 1,
                      rule: str = "exact") -> np.ndarray:
    """Batched stochastic convolution driven by Brownian increments (R, M, K).

    The exact rule integrates the piecewise-linear interpolation of the
    Brownian path; the endpoint rule is the pathwise limit of the split
    finite-volume scheme on the same time grid.
    """
    M = increments.shape[1]
    prop = SpectralPropagator(grid, speed, eta)
    spatial = noise.spatial_matrix(grid) * noise.sigma(1.0)
    return convolve(prop, increments, spatial, t_end / M, stride, rule)


def solve_linear_spde(grid: TorusGrid, noise: NoiseModel, speed: float, path: WienerPath,
                      eta: float = 0.0, stride: int = 1, rule: str = "exact") -> Trajectory:
    """CLT limit (eta = 0) or its viscous approximation, zero initial value."""
    if path.n_modes != noise.n_modes:
        raise ValueError("path and noise have different numbers of modes")
    vals = linear_spde_batch(grid, noise, speed, path.increments[None], path.t_end, eta, stride,
                             rule)[0]
    times = np.linspace(0.0, path.t_end, path.n_steps + 1)[output_indices(path.n_steps, stride)]
    return Trajectory(grid, times, vals, {"eta": eta, "kind": "linear_spde"})


def skeleton_batch(grid: TorusGrid, noise: NoiseModel, speed: float, rates: np.ndarray,
                   t_end: float, eta: float = 0.0, stride: int = 1,
                   rule: str = "exact") -> np.ndarray:
    """Skeleton solutions for a batch of control rates (R, M, K)."""
    rates = np.asarray(rates, dtype=float)
    M = rates.shape[1]
    dt = t_end / M
    prop = SpectralPropagator(grid, speed, eta)
    spatial = noise.spatial_matrix(grid) * noise.sigma(1.0)
    return convolve(prop, rates * dt, spatial, dt, stride, rule)


def solve_skeleton(grid: TorusGrid, noise: NoiseModel, speed: float, h: Control,
                   eta: float = 0.0, stride: int = 1, rule: str = "exact") -> Trajectory:
    """Controlled linear transport driven by the control rates instead of noise."""
    if h.n_modes != noise.n_modes:
        raise ValueError("control and noise have different numbers of modes")
    vals = skeleton_batch(grid, noise, speed, h.rates[None], h.t_end, eta, stride, rule)[0]
    times = h.times[output_indices(h.n_steps, stride)]
    return Trajectory(grid, times, vals, {"eta": eta, "kind": "skeleton"})
