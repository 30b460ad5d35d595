"""Euler-Maruyama particles and flow maps in a frozen velocity environment.

All particles of a replica share the environment increments; each particle
has its own molecular noise. The Ito convention is fixed by evaluating the
increment at the pre-step position. Positions are kept unwrapped; only the
field lookup reduces them modulo the box.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .covariance import ConfigurationError, CovarianceSpec
from .fieldsynth import Environment, FieldIncrement, Grid, default_dt
from .rng import BLOCK_STEPS, RngStream

_BLOCK_ELEMENTS = 1 << 17


class EnvironmentMismatch(RuntimeError):
    """An increment from the wrong replica, slot or step size was applied."""


def molecular_stream(master_seed: int, replica: int, n_particles: int, d: int, tag: str = "") -> RngStream:
    per_step = n_particles * d
    steps = max(1, min(BLOCK_STEPS, _BLOCK_ELEMENTS // per_step))
    purpose = "molecular" + (f":{tag}" if tag else "")
    return RngStream(master_seed, replica, purpose, shape=(n_particles, d), block_steps=steps)


@dataclass(frozen=True)
class ParticleEnsemble:
    positions: np.ndarray
    time: float
    step: int
    replica: int
    dt: float
    noise: RngStream = field(repr=False, compare=False)

    @property
    def size(self) -> int:
        return self.positions.shape[0]


def make_ensemble(
    positions, replica: int, dt: float, master_seed: int = 0, start_step: int = 0, tag: str = ""
) -> ParticleEnsemble:
    positions = np.array(positions, dtype=float)
    if positions.ndim == 1:
        positions = positions[:, None]
    n, d = positions.shape
    noise = molecular_stream(master_seed, replica, n, d, tag)
    return ParticleEnsemble(positions, start_step * dt, start_step, replica, dt, noise)


def _check(ens: ParticleEnsemble, inc: FieldIncrement) -> None:
    if not np.isclose(inc.dt, ens.dt, rtol=1e-12, atol=0.0):
        raise EnvironmentMismatch(f"increment dt {inc.dt} != ensemble dt {ens.dt}")
    if inc.replica >= 0 and inc.replica != ens.replica:
        raise EnvironmentMismatch(f"increment from replica {inc.replica} applied to replica {ens.replica}")
    if inc.step >= 0 and inc.step != ens.step:
        raise EnvironmentMismatch(f"increment for slot {inc.step} applied at slot {ens.step}")


def step_particles(
    ens: ParticleEnsemble, inc: FieldIncrement, nu: float, spline_coeffs: np.ndarray | None = None
) -> ParticleEnsemble:
    """``X <- X + dV(X) + sqrt(nu dt) xi`` with the increment read at the pre-step position."""
    _check(ens, inc)
    grid = inc.grid
    coeffs = inc.spline_coeffs if spline_coeffs is None else spline_coeffs
    dv = kernels.spline_eval(coeffs, ens.positions, grid.dx)
    xi = ens.noise.normals(ens.step)
    new = ens.positions + dv + np.sqrt(nu * ens.dt) * xi
    return replace(ens, positions=new, time=(ens.step + 1) * ens.dt, step=ens.step + 1)


def advance(env: Environment, ensembles: list, n_steps: int, callback=None) -> list:
    """Advance one ensemble per replica through ``n_steps`` shared environment slots.

    The increments for all replicas at a slot are synthesised in one batched
    transform. ``callback(step_index, ensembles)`` runs after every step.
    """
    grid = env.grid
    nu = env.spec.nu
    replicas = [e.replica for e in ensembles]
    steps = {e.step for e in ensembles}
    if len(steps) != 1:
        raise EnvironmentMismatch("ensembles must sit at the same slot")
    for _ in range(n_steps):
        slot = ensembles[0].step
        batch = env.batch(replicas, slot)
        coeffs = grid.irfft(batch.spectrum / grid.spline_symbol)
        ensembles = [step_particles(e, batch[i], nu, coeffs[i]) for i, e in enumerate(ensembles)]
        if callback is not None:
            callback(ensembles[0].step, ensembles)
    return ensembles


@dataclass
class TrajectorySummary:
    times: np.ndarray
    mean: np.ndarray  # (n_times, d) mean displacement over particles
    second_moment: np.ndarray  # (n_times, d, d) mean of dX dX^T over particles
    final_positions: np.ndarray
    replica: int


def simulate_ensemble(
    spec: CovarianceSpec,
    grid: Grid,
    n_particles: int,
    T: float,
    dt: float | None = None,
    replica: int = 0,
    master_seed: int = 0,
    initial=None,
    record_every: int | None = None,
    env: Environment | None = None,
) -> TrajectorySummary:
    """Run ``n_particles`` in one environment realisation up to time ``T``."""
    return simulate_replicas(
        spec, grid, n_particles, T, dt, [replica], master_seed, initial, record_every, env
    )[0]


def simulate_replicas(
    spec: CovarianceSpec,
    grid: Grid,
    n_particles: int,
    T: float,
    dt: float | None = None,
    replicas=(0,),
    master_seed: int = 0,
    initial=None,
    record_every: int | None = None,
    env: Environment | None = None,
) -> list:
    """Batched :func:`simulate_ensemble` over several replicas (each with its own environment)."""
    dt = default_dt(spec, grid) if dt is None else dt
    env = env or Environment(spec, grid, dt, master_seed)
    if env.dt != dt:
        raise EnvironmentMismatch("environment built with a different dt")
    n_steps = int(round(T / dt))
    if n_steps < 1:
        raise ConfigurationError("horizon shorter than one step")
    d = spec.dimension
    x0 = np.zeros((n_particles, d)) if initial is None else np.broadcast_to(initial, (n_particles, d))
    ensembles = [make_ensemble(x0, r, dt, master_seed) for r in replicas]
    record_every = record_every or n_steps
    times, means, moments = [], [[] for _ in replicas], [[] for _ in replicas]

    def record(step, ens):
        if step % record_every == 0 or step == n_steps:
            times.append(step * dt)
            for i, e in enumerate(ens):
                disp = e.positions - x0
                means[i].append(disp.mean(axis=0))
                moments[i].append(disp.T @ disp / disp.shape[0])

    ensembles = advance(env, ensembles, n_steps, record)
    return [
        TrajectorySummary(np.array(times), np.array(means[i]), np.array(moments[i]), e.positions, e.replica)
        for i, e in enumerate(ensembles)
    ]


def annealed_covariance(
    spec: CovarianceSpec,
    grid: Grid,
    n_particles: int,
    T: float,
    replicas,
    dt: float | None = None,
    master_seed: int = 0,
    chunk: int = 10,
):
    """Replica-level estimate of ``Cov(X(T)) / T`` with standard errors.

    Particles of one replica are correlated through the shared environment,
    so the standard error comes from the spread of per-replica means.
    """
    replicas = list(replicas)
    per = []
    for s in range(0, len(replicas), chunk):
        out = simulate_replicas(spec, grid, n_particles, T, dt, replicas[s : s + chunk], master_seed)
        per.extend(o.second_moment[-1] / o.times[-1] for o in out)
    per = np.array(per)
    return per.mean(axis=0), per.std(axis=0, ddof=1) / np.sqrt(len(per)), per


@dataclass(frozen=True)
class FlowMapSample:
    base_points: np.ndarray  # (*lattice_shape, d), a periodic lattice covering the box
    images: np.ndarray  # same shape, unwrapped
    s: float
    t: float
    box_length: float


def flow_map(env: Environment, replica: int, lattice_n: int, s_step: int, t_step: int, master_seed: int = 0) -> FlowMapSample:
    """Images ``phi_{s,t}(x)`` of a periodic lattice; all points share one molecular path."""
    grid = env.grid
    d = grid.dimension
    h = grid.length / lattice_n
    axes = [np.arange(lattice_n) * h] * d
    base = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    pts = base.reshape(-1, d).copy()
    # one Brownian path shared by every base point
    bm = RngStream(master_seed, replica, "flowmap-molecular", shape=(d,))
    for k in range(s_step, t_step):
        inc = env.increment(replica, k)
        pts = pts + kernels.spline_eval(inc.spline_coeffs, pts, grid.dx) + np.sqrt(env.spec.nu * env.dt) * bm.normals(k)
    return FlowMapSample(base, pts.reshape(base.shape), s_step * env.dt, t_step * env.dt, grid.length)


def flow_jacobian(fm: FlowMapSample) -> np.ndarray:
    """Determinant of the central-difference Jacobian of ``x -> phi(x)`` at every lattice point.

    The displacement ``phi(x) - x`` is periodic on the torus, so differences
    are taken periodically on it.
    """
    if not np.all(np.isfinite(fm.images)):
        raise FloatingPointError("flow map contains non-finite images")
    d = fm.base_points.shape[-1]
    n = fm.base_points.shape[0]
    h = fm.box_length / n
    disp = fm.images - fm.base_points
    jac = np.empty(fm.base_points.shape[:-1] + (d, d))
    for j in range(d):
        grad = (np.roll(disp, -1, axis=j) - np.roll(disp, 1, axis=j)) / (2 * h)
        jac[..., :, j] = grad
    jac += np.eye(d)
    return np.linalg.det(jac)
