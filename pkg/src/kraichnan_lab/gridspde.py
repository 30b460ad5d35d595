"""Grid solver for the quenched Fokker-Planck SPDE

    du = 1/2 tr[(nu I + R(0)) D^2 u] dt - div(u dV)

on the periodic box, the Gaussian density ``G_t`` and kernel density
estimates of particle clouds.

Transport is discretised in flux form with spectral derivatives (Nyquist
modes of the derivative zeroed), so the zero mode of the update vanishes
identically: mass is conserved to round-off and a constant field is left
unchanged by divergence-free increments.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .covariance import ConfigurationError, CovarianceSpec, effective_diffusivity
from .fieldsynth import Environment, FieldIncrement, Grid, default_dt, stability_limit

SCHEMES = ("explicit", "etd")


class StabilityError(ConfigurationError):
    """Time step outside the mean-square stable range of the scheme."""


@dataclass(frozen=True)
class DensityField:
    grid: Grid
    values: np.ndarray
    time: float

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def at(self, x) -> np.ndarray:
        """Band-limited (trigonometric) interpolation at points ``x`` (N, d)."""
        from .fieldsynth import fourier_eval

        x = np.atleast_2d(np.asarray(x, dtype=float))
        return fourier_eval(self.grid, self.grid.rfft(self.values)[None], x)[:, 0]

    def to_csv(self, path) -> None:
        coords = self.grid.coords().reshape(-1, self.grid.dimension)
        header = ",".join([f"x{i + 1}" for i in range(self.grid.dimension)] + ["u"])
        np.savetxt(path, np.column_stack([coords, self.values.reshape(-1)]), delimiter=",",
                   header=header, comments="", fmt="%.17g")


def gaussian_density(spec: CovarianceSpec, t: float, x) -> np.ndarray:
    """Centred Gaussian density with covariance ``(nu I + R(0)) t`` at points ``x`` (..., d)."""
    if not t > 0:
        raise ValueError("gaussian_density needs t > 0")
    d = spec.dimension
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    cov = effective_diffusivity(spec) * t
    inv = np.linalg.inv(cov)
    q = np.einsum("...i,ij,...j->...", x, inv, x)
    return np.exp(-0.5 * q) / np.sqrt((2 * np.pi) ** d * np.linalg.det(cov))


def gaussian_on_grid(spec: CovarianceSpec, grid: Grid, t: float, center=None) -> np.ndarray:
    """Periodised ``G_t`` sampled on the grid nodes (sum over the nearest images)."""
    d = grid.dimension
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float).reshape(d)
    z = grid.wrap_centered(grid.coords() - c)
    out = np.zeros(grid.shape)
    shifts = np.array(np.meshgrid(*([[-1, 0, 1]] * d), indexing="ij")).reshape(d, -1).T
    for s in shifts:
        out += gaussian_density(spec, t, z + s * grid.length)
    return out


class SpdeSolver:
    """One-step map for a batch of fields sharing a grid and step size."""

    def __init__(self, spec: CovarianceSpec, grid: Grid, dt: float, scheme: str = "explicit"):
        if scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        limit = stability_limit(spec, grid, scheme)
        if dt > limit:
            raise StabilityError(f"dt = {dt:.4g} exceeds the {scheme} stability limit {limit:.4g}")
        self.spec, self.grid, self.dt, self.scheme = spec, grid, dt, scheme

    @cached_property
    def _decay(self) -> np.ndarray:
        a = effective_diffusivity(self.spec)
        k = self.grid.wavevectors
        kd = self.grid.derivative_wavevectors
        d = self.grid.dimension
        # diagonal second derivatives keep the Nyquist mode, mixed ones do not
        q = sum(a[i, i] * k[..., i] ** 2 for i in range(d))
        q = q + sum(a[i, j] * kd[..., i] * kd[..., j] for i in range(d) for j in range(d) if i != j)
        x = 0.5 * q * self.dt
        return 1.0 - x if self.scheme == "explicit" else np.exp(-x)

    @cached_property
    def _ik(self) -> np.ndarray:
        return np.moveaxis(1j * self.grid.derivative_wavevectors, -1, 0)

    def step(self, u: np.ndarray, dv: np.ndarray) -> np.ndarray:
        """Advance fields ``u`` (..., *shape) by increments ``dv`` (..., d, *shape) in physical space."""
        g = self.grid
        d = g.dimension
        u_hat = g.rfft(u)
        flux_hat = g.rfft(np.expand_dims(u, -d - 1) * dv)
        div_hat = np.sum(self._ik * flux_hat, axis=-d - 1)
        return g.irfft(u_hat * self._decay - div_hat)

    def heat(self, u: np.ndarray, n_steps: int) -> np.ndarray:
        """``n_steps`` noiseless steps (the annealed mean evolution of the same scheme)."""
        g = self.grid
        return g.irfft(g.rfft(u) * self._decay**n_steps)


def spde_step(u: DensityField, inc: FieldIncrement, spec: CovarianceSpec, scheme: str = "explicit") -> DensityField:
    """One explicit (or exponential-integrator) step of the quenched SPDE."""
    if inc.grid != u.grid:
        raise ConfigurationError("increment and density live on different grids")
    solver = SpdeSolver(spec, u.grid, inc.dt, scheme)
    return DensityField(u.grid, solver.step(u.values, inc.values), u.time + inc.dt)


def slot_of(t: float, dt: float) -> int:
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ConfigurationError(f"time {t} is not on the step lattice of dt = {dt}")
    return k


def aligned_dt(dt_max: float, times) -> float:
    """Largest step ``<= dt_max`` that puts every time in ``times`` on the step lattice.

    Tries ``min(times) / m``; falls back to a power of two (exact for dyadic times).
    """
    times = [float(t) for t in times if t != 0]
    if not times:
        return dt_max
    t0 = min(abs(t) for t in times)
    dt = t0 / np.ceil(t0 / dt_max - 1e-12)
    if all(abs(t / dt - round(t / dt)) < 1e-9 * max(1.0, abs(t / dt)) for t in times):
        return dt
    return 2.0 ** np.floor(np.log2(dt_max))


def evolve_batch(
    env: Environment,
    u: np.ndarray,
    replicas,
    k0: int,
    k1: int,
    scheme: str = "explicit",
    callback=None,
    solver: SpdeSolver | None = None,
) -> np.ndarray:
    """Advance ``u`` (B, *shape) from slot ``k0`` to ``k1``; row ``b`` uses replica ``replicas[b]``.

    Rows with the same replica share the increments exactly (coupled runs).
    ``callback(k, u)`` is called after each step with the new slot index.
    """
    replicas = [int(r) for r in replicas]
    uniq = sorted(set(replicas))
    idx = np.array([uniq.index(r) for r in replicas])
    solver = solver or SpdeSolver(env.spec, env.grid, env.dt, scheme)
    u = np.array(u, dtype=float)
    for k in range(k0, k1):
        dv = env.batch(uniq, k).values
        u = solver.step(u, dv[idx])
        if callback is not None:
            callback(k + 1, u)
    return u


def solve_spde(
    u0: DensityField,
    t0: float,
    t1: float,
    replica: int,
    spec: CovarianceSpec,
    env: Environment | None = None,
    scheme: str = "explicit",
    master_seed: int = 0,
) -> DensityField:
    """Terminal field at ``t1`` driven by slots ``[t0/dt, t1/dt)`` of the replica's environment."""
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    env = env or Environment(spec, u0.grid, default_dt(spec, u0.grid, scheme), master_seed)
    k0, k1 = slot_of(t0, env.dt), slot_of(t1, env.dt)
    out = evolve_batch(env, u0.values[None], [replica], k0, k1, scheme)
    return DensityField(u0.grid, out[0], k1 * env.dt)


def regularized_delta(spec: CovarianceSpec, grid: Grid, dt: float, reg_steps: int = 10) -> DensityField:
    """The delta initial datum replaced by ``G_{t_reg}``, ``t_reg = reg_steps * dt``."""
    t = reg_steps * dt
    return DensityField(grid, gaussian_on_grid(spec, grid, t), t)


def kde_estimate(positions, bandwidth: float, grid: Grid) -> DensityField:
    """Gaussian KDE on the grid: cloud-in-cell deposit, then spectral Gaussian smoothing.

    The zero mode is untouched, so the estimate has mass exactly 1. Its
    smoothing variance is ``bandwidth^2`` plus ``dx^2 / 6`` from the deposit.
    """
    from . import kernels

    x = np.atleast_2d(np.asarray(positions, dtype=float))
    if grid.dimension == 1 and x.shape[-1] != 1:
        x = x.reshape(-1, 1)
    if x.shape[0] == 0:
        raise ValueError("empty particle ensemble")
    if bandwidth < 2 * grid.dx * (1 - 1e-12):
        raise ConfigurationError(f"bandwidth {bandwidth} below 2 dx = {2 * grid.dx}")
    counts = kernels.deposit_cic(np.mod(x, grid.length), grid.dx, grid.shape)
    rho = counts / (x.shape[0] * grid.cell_volume)
    k2 = np.sum(grid.wavevectors**2, axis=-1)
    smooth = grid.irfft(grid.rfft(rho) * np.exp(-0.5 * bandwidth**2 * k2))
    return DensityField(grid, smooth, np.nan)


def negativity_ratio(u: np.ndarray) -> float:
    """``-min u / max u`` (positive when the field dips below zero)."""
    return float(-np.min(u) / np.max(u))


def half_step_increments(env: Environment, replicas, k: int, bridge: Environment) -> tuple:
    """Split slot ``k`` into two half-step increments that sum to the original.

    With ``eta`` an independent copy from ``bridge``, ``(dV + eta)/2`` and
    ``(dV - eta)/2`` are independent with covariance ``R dt / 2`` each.
    """
    dv = env.batch(replicas, k).values
    eta = bridge.batch(replicas, k).values
    return 0.5 * (dv + eta), 0.5 * (dv - eta)


def evolve_refined(env: Environment, u: np.ndarray, replicas, k0: int, k1: int, scheme: str = "explicit") -> np.ndarray:
    """Same environment path as :func:`evolve_batch`, integrated with half steps."""
    bridge = Environment(env.spec, env.grid, env.dt, env.master_seed, purpose=env.purpose + ":bridge")
    solver = SpdeSolver(env.spec, env.grid, env.dt / 2, scheme)
    replicas = [int(r) for r in replicas]
    u = np.array(u, dtype=float)
    for k in range(k0, k1):
        a, b = half_step_increments(env, replicas, k, bridge)
        u = solver.step(solver.step(u, a), b)
    return u


@dataclass
class DualityReport:
    x: np.ndarray  # bulk node coordinates
    grid_u: np.ndarray
    kde_u: np.ndarray
    bias: np.ndarray
    mc_se: np.ndarray
    scheme_error: np.ndarray
    sup_error: float
    sup_budget_ratio: float  # max |kde - u| / (bias + se + scheme) over the bulk
    smoothed_ratio: float  # max |kde - K_h * u| / (se + K_h * scheme), bias-free diagnostic

    @property
    def ok(self) -> bool:
        return self.sup_budget_ratio <= 3.0


def duality_check(
    spec: CovarianceSpec,
    grid: Grid,
    T: float,
    n_particles: int = 100_000,
    bandwidth: float | None = None,
    replica: int = 0,
    master_seed: int = 0,
    bulk_sigmas: float = 2.0,
    scheme: str = "explicit",
) -> DualityReport:
    """Particle cloud vs grid solution in one environment realisation.

    Both start from ``G_{t_reg}`` at slot ``reg_steps`` (particles are drawn
    from it) and read the same increments. The pointwise budget is the exact
    smoothing bias of the KDE applied to the grid field, the Monte Carlo
    standard error of the KDE, and a step-halving estimate of the grid
    scheme error.
    """
    from . import flow

    dt = default_dt(spec, grid, scheme)
    dt = aligned_dt(dt, [T])
    env = Environment(spec, grid, dt, master_seed)
    k_reg = 10
    k1 = slot_of(T, dt)
    h = bandwidth or 2 * grid.dx
    u0 = gaussian_on_grid(spec, grid, k_reg * dt)
    u = evolve_batch(env, u0[None], [replica], k_reg, k1, scheme)[0]
    u_half = evolve_refined(env, u0[None], [replica], k_reg, k1, scheme)[0]
    scheme_err = 2.0 * np.abs(u - u_half)  # first order: err(dt) ~ 2 |u_dt - u_dt/2|

    g0 = np.random.default_rng([master_seed, 11, replica])
    cov0 = effective_diffusivity(spec) * k_reg * dt
    x0 = g0.multivariate_normal(np.zeros(grid.dimension), cov0, size=n_particles)
    ens = flow.make_ensemble(x0, replica, dt, master_seed, start_step=k_reg, tag="duality")
    ens = flow.advance(env, [ens], k1 - k_reg)[0]
    kde = kde_estimate(ens.positions, h, grid).values

    k2 = np.sum(grid.wavevectors**2, axis=-1)
    u_hat = grid.rfft(u)
    smoothed = grid.irfft(u_hat * np.exp(-0.5 * h**2 * k2))
    bias = np.abs(smoothed - u) + 0.5 * (grid.dx**2 / 6.0) * np.abs(grid.irfft(-k2 * u_hat))
    # Var K_h(x - X) / N with K^2 a Gaussian of variance h^2/2 scaled by (4 pi h^2)^{-d/2}
    d = grid.dimension
    k_sq = grid.irfft(u_hat * np.exp(-0.25 * h**2 * k2)) / (4 * np.pi * h**2) ** (d / 2)
    mc_se = np.sqrt(np.clip(k_sq - smoothed**2, 0, None) / n_particles)

    a = effective_diffusivity(spec)
    z = grid.centered_coords()
    quad = np.einsum("...i,ij,...j->...", z, np.linalg.inv(a * T), z)
    bulk = quad <= bulk_sigmas**2
    err = np.abs(kde - u)[bulk]
    budget = (bias + mc_se + scheme_err)[bulk]
    # the deposit adds a hat-function smoothing of variance dx^2/6; fold it into the comparison kernel
    kern = np.exp(-0.5 * (h**2 + grid.dx**2 / 6.0) * k2)
    smooth_scheme = grid.irfft(grid.rfft(scheme_err) * kern)
    strict = np.abs(kde - grid.irfft(u_hat * kern))[bulk] / (mc_se + smooth_scheme)[bulk]
    return DualityReport(
        z[bulk], u[bulk], kde[bulk], bias[bulk], mc_se[bulk], scheme_err[bulk],
        float(err.max()), float(np.max(err / budget)), float(strict.max()),
    )
