"""The stationary corrector ``U``: long-time limit of solutions started from the constant 1.

``run_from_constant`` evolves ``u = 1`` from time ``t - M`` to ``t``. Slots
before zero are ordinary (negative) slot indices of the replica's stream,
so runs with different burn-in share the noise on their common interval.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import ConfigurationError, CovarianceSpec, InsufficientReplicas
from .fieldsynth import Environment, Grid, default_dt
from .gridspde import DensityField, SpdeSolver, evolve_batch, slot_of


@dataclass(frozen=True)
class CorrectorEstimate:
    field: DensityField
    burn_in: float
    replica_index: int


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float


def mixing_time(spec: CovarianceSpec) -> float:
    return spec.corr_length**2 / spec.nu


def _env(spec, grid, env, master_seed, scheme):
    return env or Environment(spec, grid, default_dt(spec, grid, scheme), master_seed)


def run_from_constant(
    spec: CovarianceSpec,
    grid: Grid,
    M: float,
    t: float,
    replica: int,
    env: Environment | None = None,
    scheme: str = "explicit",
    master_seed: int = 0,
) -> CorrectorEstimate:
    return run_batch(spec, grid, M, t, [replica], env, scheme, master_seed)[0]


def run_batch(
    spec: CovarianceSpec,
    grid: Grid,
    M: float,
    t: float,
    replicas,
    env: Environment | None = None,
    scheme: str = "explicit",
    master_seed: int = 0,
    extra_times=(),
) -> list:
    """:func:`run_from_constant` for several replicas in one batched pass.

    With ``extra_times`` (later than ``t``) the same runs are continued and the
    return value is a list with one list of estimates per time ``(t, *extra_times)``.
    """
    env = _env(spec, grid, env, master_seed, scheme)
    if M < 10 * mixing_time(spec):
        import warnings

        warnings.warn(f"burn-in M = {M} is below 10 mixing times ({10 * mixing_time(spec):.3g})", stacklevel=2)
    replicas = list(replicas)
    times = [t, *sorted(extra_times)]
    k0 = slot_of(t - M, env.dt)
    ks = [slot_of(s, env.dt) for s in times]
    snaps = {}
    solver = SpdeSolver(spec, grid, env.dt, scheme)

    def grab(k, u):
        if k in ks:
            snaps[k] = u.copy()

    u = np.ones((len(replicas),) + grid.shape)
    if k0 in ks:
        snaps[k0] = u.copy()
    evolve_batch(env, u, replicas, k0, ks[-1], scheme, grab, solver)
    out = [
        [CorrectorEstimate(DensityField(grid, snaps[k][i], k * env.dt), (k - k0) * env.dt, r) for i, r in enumerate(replicas)]
        for k in ks
    ]
    return out if extra_times else out[0]


def _check_replicas(n: int, minimum: int) -> None:
    if n < minimum:
        raise InsufficientReplicas(f"need at least {minimum} replicas, got {n}")


def jackknife_mean(samples: np.ndarray) -> Estimate:
    """Mean over replicas with the (leave-one-out) jackknife standard error."""
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    loo = (x.sum(axis=0) - x) / (n - 1)
    var = (n - 1) / n * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0)
    return Estimate(float(x.mean(axis=0)), float(np.sqrt(var)))


def _shift_index(grid: Grid, z) -> tuple:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    steps = np.round(z / grid.dx).astype(int)
    if not np.allclose(steps * grid.dx, z):
        raise ConfigurationError(f"separation {z} is not a multiple of dx = {grid.dx}")
    return tuple(int(s) for s in steps)


def spatial_product(u: np.ndarray, grid: Grid, z, region: slice | None = None) -> float:
    """Spatial average of ``u(x) u(x + z)``; ``region`` restricts the first axis of ``x``."""
    shift = _shift_index(grid, z)
    v = np.roll(u, tuple(-s for s in shift), axis=tuple(range(grid.dimension)))
    prod = u * v
    if region is not None:
        prod = prod[region]
    return float(prod.mean())


def two_point_correlation(estimates: list, z, min_replicas: int = 50, region: slice | None = None) -> Estimate:
    """``E[U(t, x) U(t, x + z)]`` averaged over ``x``, jackknife error over replicas."""
    _check_replicas(len(estimates), min_replicas)
    ref = estimates[0]
    for e in estimates:
        if e.field.grid != ref.field.grid or e.burn_in != ref.burn_in or e.field.time != ref.field.time:
            raise ConfigurationError("estimates do not share grid, burn-in and time")
    samples = np.array([spatial_product(e.field.values, e.field.grid, z, region) for e in estimates])
    return jackknife_mean(samples)


def lag_correlation(first: list, later: list, min_replicas: int = 50) -> Estimate:
    """``E[(U(t, x) - 1)(U(t + tau, x) - 1)]`` from paired estimates of the same replicas."""
    _check_replicas(len(first), min_replicas)
    samples = []
    for a, b in zip(first, later):
        if a.replica_index != b.replica_index:
            raise ConfigurationError("lag pairs must come from the same replica")
        samples.append(float(np.mean((a.field.values - 1) * (b.field.values - 1))))
    return jackknife_mean(np.array(samples))


def time_correlation(
    spec: CovarianceSpec,
    grid: Grid,
    lags,
    replicas,
    M: float,
    t: float = 0.0,
    env: Environment | None = None,
    scheme: str = "explicit",
    master_seed: int = 0,
    min_replicas: int = 50,
) -> list:
    """Lag correlations at every ``tau`` in ``lags``, evolving each replica past ``t``."""
    replicas = list(replicas)
    _check_replicas(len(replicas), min_replicas)
    env = _env(spec, grid, env, master_seed, scheme)
    lags = [float(x) for x in lags]
    later = sorted({t + x for x in lags if x > 0})
    runs = run_batch(spec, grid, M, t, replicas, env, scheme, extra_times=later)
    first = runs[0]
    by_time = {t: first, **{s: r for s, r in zip(later, runs[1:])}}
    return [lag_correlation(first, by_time[t + x], min_replicas) for x in lags]


def cauchy_gaps(
    spec: CovarianceSpec,
    grid: Grid,
    burn_ins,
    replicas,
    t: float = 0.0,
    env: Environment | None = None,
    scheme: str = "explicit",
    master_seed: int = 0,
) -> list:
    """``E|u^[2M](t) - u^[M](t)|^2`` (space-averaged) for each ``M``, with shared noise.

    Both runs use identical increments on ``[t - M, t]``; only the longer one
    sees the slots before ``t - M``.
    """
    env = _env(spec, grid, env, master_seed, scheme)
    replicas = list(replicas)
    out = []
    for M in burn_ins:
        long = run_batch(spec, grid, 2 * M, t, replicas, env, scheme)
        short = run_batch(spec, grid, M, t, replicas, env, scheme)
        gaps = [float(np.mean((a.field.values - b.field.values) ** 2)) for a, b in zip(long, short)]
        out.append(jackknife_mean(np.array(gaps)))
    return out
