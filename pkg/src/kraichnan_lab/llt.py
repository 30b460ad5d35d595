"""Turn-off-noise experiment, product approximation ``u ~ G_t * U`` and decay-rate fits.

For a ladder of times ``t`` and ``q = t - t^beta``, each replica carries
in one batched pass:

* ``u``       -- the solution from the regularised delta, recorded at every ``t``;
* ``u~_q``    -- ``G_q`` at time ``q``, then the SPDE on ``[q, t]``;
* ``u_q``     -- the constant 1 at time ``q``, then the SPDE on ``[q, t]``.

All three read the same environment slots on ``[q, t]``; ``u~_q`` is the
conditional expectation of ``u(t)`` given the noise after ``q`` because
averaging the SPDE over the earlier noise leaves exactly the heat flow.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .covariance import ConfigurationError, CovarianceSpec, effective_diffusivity
from .fieldsynth import Environment, Grid, default_dt, fourier_eval
from .gridspde import SpdeSolver, aligned_dt, gaussian_density, gaussian_on_grid, slot_of


def default_beta(d: int) -> float:
    return 2.0 / 3.0 if d == 1 else d / (d + 2.0)


@dataclass
class ExperimentPlan:
    spec: CovarianceSpec
    grid: Grid
    ladder: tuple = (2.0, 4.0, 8.0, 16.0)
    beta: float | None = None
    replicas: int = 200
    probe_multipliers: tuple = (0.0, 0.25, 0.5)
    bulk_c: float = 0.3
    dt: float | None = None
    master_seed: int = 0
    scheme: str = "explicit"
    reg_steps: int = 10
    chunk: int = 50
    first_replica: int = 0

    def __post_init__(self):
        if self.beta is None:
            self.beta = default_beta(self.spec.dimension)
        if self.dt is None:
            self.dt = aligned_dt(default_dt(self.spec, self.grid, self.scheme), self.ladder)
        self.ladder = tuple(float(t) for t in self.ladder)
        self.validate()

    def validate(self) -> None:
        if not 0 < self.beta < 1:
            raise ConfigurationError(f"beta must lie in (0, 1), got {self.beta}")
        if len(self.ladder) < 1 or any(t <= 0 for t in self.ladder):
            raise ConfigurationError("ladder times must be positive")
        t_reg = self.reg_steps * self.dt
        for t in self.ladder:
            slot_of(t, self.dt)
            if self.q_slot(t) * self.dt <= t_reg:
                raise ConfigurationError(f"q = t - t^beta is not after the regularisation time at t = {t}")
            self.probes(t)

    def q_slot(self, t: float) -> int:
        return int(round((t - t**self.beta) / self.dt))

    def q(self, t: float) -> float:
        return self.q_slot(t) * self.dt

    def probes(self, t: float) -> np.ndarray:
        """Multiples of the diffusive scale ``sqrt(a_ii t)`` along each axis; bulk-checked."""
        a = effective_diffusivity(self.spec)
        d = self.spec.dimension
        pts = [np.zeros(d)]
        for m in self.probe_multipliers:
            if m == 0:
                continue
            for i in range(d):
                p = np.zeros(d)
                p[i] = m * np.sqrt(a[i, i] * t)
                pts.append(p)
        pts = np.array(pts)
        quad = np.einsum("ni,ij,nj->n", pts, np.linalg.inv(a), pts)
        bound = self.bulk_c * t * max(1.0, np.log(t))
        if np.any(quad > bound * (1 + 1e-12)):
            raise ConfigurationError(f"probe points leave the diffusive bulk at t = {t}")
        if np.any(np.abs(pts) > self.grid.length / 4):
            raise ConfigurationError(f"probe points too close to the box boundary at t = {t}")
        return pts


@dataclass
class ErrorCurve:
    t: np.ndarray
    per_replica: np.ndarray  # (replicas, len(t)) squared errors averaged over probes
    label: str = ""
    scale: np.ndarray | None = None  # multiplies the errors (normalisation by t^d)
    meta: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        s = 1.0 if self.scale is None else self.scale
        return s * self.per_replica.mean(axis=0)

    @property
    def stderr(self) -> np.ndarray:
        s = 1.0 if self.scale is None else self.scale
        n = self.per_replica.shape[0]
        if n < 2:
            return np.zeros(len(self.t))
        return s * self.per_replica.std(axis=0, ddof=1) / np.sqrt(n)

    def normalized(self, power: float) -> "ErrorCurve":
        return ErrorCurve(self.t, self.per_replica, self.label + f" * t^{power:g}", self.t**power, dict(self.meta))

    @classmethod
    def from_values(cls, t, values, label: str = "") -> "ErrorCurve":
        """A curve without replica data (rate fits fall back to ordinary least squares)."""
        return cls(np.asarray(t, dtype=float), np.asarray(values, dtype=float)[None, :], label)

    def strictly_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.values) < 0))

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.t, self.values, self.stderr])
        np.savetxt(path, rows, delimiter=",", header="t,error,stderr", comments="", fmt="%.17g")


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    stderr: float
    method: str

    @property
    def excludes_zero_from_above(self) -> bool:
        return self.ci_high < 0


def _ols(logt, loge):
    return np.polyfit(logt, loge, 1)


def rate_fit(curve: ErrorCurve, level: float = 0.95) -> RateFit:
    """Log-log least squares with a replica jackknife interval (or the OLS interval without replicas)."""
    t = np.asarray(curve.t, dtype=float)
    e = curve.values
    if len(t) < 4:
        raise ConfigurationError("rate fits need at least 4 ladder points")
    if np.any(e <= 0):
        raise ValueError("errors must be positive for a log-log fit")
    logt = np.log(t)
    slope, intercept = _ols(logt, np.log(e))
    n = curve.per_replica.shape[0]
    if n >= 3:
        scale = 1.0 if curve.scale is None else curve.scale
        total = curve.per_replica.sum(axis=0)
        loo = scale * (total - curve.per_replica) / (n - 1)
        if np.any(loo <= 0):
            raise ValueError("jackknife replicate with nonpositive error")
        slopes = np.array([_ols(logt, np.log(row))[0] for row in loo])
        se = float(np.sqrt((n - 1) / n * np.sum((slopes - slopes.mean()) ** 2)))
        z = stats.norm.ppf(0.5 + level / 2)
        method = "jackknife"
    else:
        res = stats.linregress(logt, np.log(e))
        se = float(res.stderr)
        z = stats.t.ppf(0.5 + level / 2, len(t) - 2)
        method = "ols"
    return RateFit(float(slope), float(intercept), float(slope - z * se), float(slope + z * se), se, method)


@dataclass
class LadderResult:
    plan: ExperimentPlan
    product: ErrorCurve  # E|u - G_t u_q|^2
    turnoff: ErrorCurve | None  # E|u - u~_q|^2
    ratio: ErrorCurve  # E|u / G_t - u_q|^2
    lclt: ErrorCurve  # E|u - G_t|^2
    min_ratio: float  # worst -min/max over all recorded fields


def run_ladder(plan: ExperimentPlan, turnoff: bool = True, env: Environment | None = None) -> LadderResult:
    """One batched pass per replica chunk producing every curve of the plan."""
    spec, grid, dt = plan.spec, plan.grid, plan.dt
    env = env or Environment(spec, grid, dt, plan.master_seed)
    if env.dt != dt:
        raise ConfigurationError("environment step differs from the plan")
    solver = SpdeSolver(spec, grid, dt, plan.scheme)
    ladder = plan.ladder
    kt = [slot_of(t, dt) for t in ladder]
    kq = [plan.q_slot(t) for t in ladder]
    probes = [plan.probes(t) for t in ladder]
    G_probe = [gaussian_density(spec, t, p) for t, p in zip(ladder, probes)]
    k_reg = plan.reg_steps
    u_reg = gaussian_on_grid(spec, grid, k_reg * dt)
    replicas = list(range(plan.first_replica, plan.first_replica + plan.replicas))
    nt = len(ladder)
    prod = np.empty((len(replicas), nt))
    gap = np.empty((len(replicas), nt))
    ratio = np.empty((len(replicas), nt))
    lclt = np.empty((len(replicas), nt))
    worst = -np.inf
    # constants are preserved exactly under divergence-free transport
    track_under = not spec.is_incompressible

    def at(vals, pts):
        # vals (R, *shape) -> (R, P)
        return fourier_eval(grid, grid.rfft(vals), pts).T

    for c0 in range(0, len(replicas), plan.chunk):
        reps = replicas[c0 : c0 + plan.chunk]
        R = len(reps)
        # rows: "u" plus ("tilde", j) / ("under", j) while active
        labels = ["u"]
        state = u_reg[None, None].repeat(R, 0)
        for k in range(k_reg, max(kt) + 1):
            for j in range(nt):
                if kq[j] == k:
                    new = []
                    if track_under:
                        new.append(np.ones(grid.shape))
                        labels.append(("under", j))
                    if turnoff:
                        # conditional mean of the scheme's own evolution up to q
                        new.append(solver.heat(u_reg, k - k_reg))
                        labels.append(("tilde", j))
                    if new:
                        block = np.stack(new)[None].repeat(R, 0)
                        state = np.concatenate([state, block], axis=1)
            for j in range(nt):
                if kt[j] == k:
                    rows = {lab: i for i, lab in enumerate(labels)}
                    u = at(state[:, rows["u"]], probes[j])
                    under = at(state[:, rows[("under", j)]], probes[j]) if track_under else 1.0
                    prod[c0 : c0 + R, j] = np.mean((u - G_probe[j] * under) ** 2, axis=1)
                    ratio[c0 : c0 + R, j] = np.mean((u / G_probe[j] - under) ** 2, axis=1)
                    lclt[c0 : c0 + R, j] = np.mean((u - G_probe[j]) ** 2, axis=1)
                    if turnoff:
                        tilde = at(state[:, rows[("tilde", j)]], probes[j])
                        gap[c0 : c0 + R, j] = np.mean((u - tilde) ** 2, axis=1)
                    flat = state.reshape(R, len(labels), -1)
                    worst = max(worst, float(np.max(-flat.min(axis=-1) / flat.max(axis=-1))))
                    keep = [i for i, lab in enumerate(labels) if lab not in (("under", j), ("tilde", j))]
                    state = state[:, keep]
                    labels = [labels[i] for i in keep]
            if k == max(kt):
                break
            dv = env.batch(reps, k).values  # (R, d, *shape)
            state = solver.step(state, dv[:, None])
    t = np.array(ladder)
    meta = {"beta": plan.beta, "q": [plan.q(s) for s in ladder], "dt": dt}
    return LadderResult(
        plan,
        ErrorCurve(t, prod, "E|u - G_t u_q|^2", meta=meta),
        ErrorCurve(t, gap, "E|u - u~_q|^2", meta=meta) if turnoff else None,
        ErrorCurve(t, ratio, "E|u/G_t - u_q|^2", meta=meta),
        ErrorCurve(t, lclt, "E|u - G_t|^2", meta=meta),
        worst,
    )


def turnoff_experiment(plan: ExperimentPlan, t: float) -> tuple:
    """Replica mean and standard error of ``E|u(t) - u~_q(t)|^2`` at the probe points."""
    single = ExperimentPlan(**{**plan.__dict__, "ladder": (t,)})
    res = run_ladder(single, turnoff=True)
    return float(res.turnoff.values[0]), float(res.turnoff.stderr[0])


def product_error_curve(plan: ExperimentPlan) -> ErrorCurve:
    return run_ladder(plan, turnoff=False).product
