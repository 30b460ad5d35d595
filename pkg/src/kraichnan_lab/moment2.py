"""Second-moment machinery for the separation of two particles in one environment.

The annealed density of ``Z = X - Y`` solves

    dS/dt = sum_ij d_i d_j (A22_ij(z) S),   A22 = nu I + R(0) - (R + R^T)/2

(the generator of ``Z`` has quadratic variation ``2 A22 dt``). With constant
initial datum this is the two-point function ``E[u(t, x) u(t, x + z)]`` of
the solution started from 1, which converges to the invariant density chi.

Everything here is deterministic: a conservative finite-difference operator
on a periodic z-grid, explicit time stepping, and a direct sparse solve for
the stationary state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .covariance import (
    ConfigurationError,
    CovarianceSpec,
    InsufficientReplicas,
    a22_matrix,
    a_matrix,
    chi_closed_form,
)
from .fieldsynth import Grid


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ZField:
    grid: Grid
    values: np.ndarray
    time: float

    def far_field(self) -> float:
        """Value at the maximal separation (the corner ``z = (L/2, ..., L/2)``)."""
        return float(self.values[(self.grid.n // 2,) * self.grid.dimension])

    def to_csv(self, path, reference: np.ndarray | None = None) -> None:
        g = self.grid
        z = g.centered_coords().reshape(-1, g.dimension)
        cols = [z, self.values.reshape(-1, 1)]
        names = [f"z{i + 1}" for i in range(g.dimension)] + ["value"]
        if reference is not None:
            ref = np.asarray(reference).reshape(-1, 1)
            cols += [ref, np.abs(self.values.reshape(-1, 1) - ref)]
            names += ["reference", "abs_error"]
        np.savetxt(path, np.hstack(cols), delimiter=",", header=",".join(names), comments="", fmt="%.17g")


def _d1(n: int, h: float, kind: str):
    e = np.ones(n)
    if kind == "second":
        m = sparse.diags([e[:-1], -2 * e, e[:-1]], [-1, 0, 1], shape=(n, n), format="lil")
        m[0, n - 1] = 1.0
        m[n - 1, 0] = 1.0
        return m.tocsr() / h**2
    m = sparse.diags([-e[:-1], e[:-1]], [-1, 1], shape=(n, n), format="lil")
    m[0, n - 1] = -1.0
    m[n - 1, 0] = 1.0
    return m.tocsr() / (2 * h)


def _axis_op(op, axis: int, d: int, n: int):
    mats = [sparse.identity(n, format="csr")] * d
    mats[axis] = op
    out = mats[0]
    for m in mats[1:]:
        out = sparse.kron(out, m, format="csr")
    return out


def diffusion_operator(A: np.ndarray, grid: Grid):
    """Sparse ``S -> sum_ij D_ij (A_ij S)`` on the periodic grid.

    ``A`` has shape ``(*grid.shape, d, d)``. Diagonal terms use the
    three-point second difference, mixed terms products of centred first
    differences. Every column of each ``D_ij`` sums to zero, so the total
    ``sum S`` is conserved exactly.
    """
    d, n, h = grid.dimension, grid.n, grid.dx
    sec = _d1(n, h, "second")
    cen = _d1(n, h, "first")
    total = None
    for i in range(d):
        for j in range(d):
            coef = A[..., i, j].reshape(-1)
            if not np.any(coef):
                continue
            if i == j:
                D = _axis_op(sec, i, d, n)
            else:
                D = _axis_op(cen, i, d, n) @ _axis_op(cen, j, d, n)
            term = D @ sparse.diags(coef)
            total = term if total is None else total + term
    if total is None:
        total = sparse.csr_matrix((grid.size, grid.size))
    return total.tocsr()


def divergence_form_operator(spec: CovarianceSpec, grid: Grid):
    """Sparse ``S -> sum_ij d_i (A22_ij d_j S)``.

    Equal to the forward operator whenever ``sum_i d_i A22_ij = 0``
    (incompressible fields), and then annihilates constants exactly.
    Diagonal terms are staggered (coefficient at half nodes), mixed terms
    use centred differences.
    """
    d, n, h = grid.dimension, grid.n, grid.dx
    e = np.ones(n)
    fwd = sparse.diags([-e, e[:-1]], [0, 1], shape=(n, n), format="lil")
    fwd[n - 1, 0] = 1.0
    fwd = fwd.tocsr() / h
    bwd = (-fwd.T).tocsr()
    cen = _d1(n, h, "first")
    z = grid.centered_coords()
    total = sparse.csr_matrix((grid.size, grid.size))
    for i in range(d):
        for j in range(d):
            if i == j:
                shift = np.zeros(d)
                shift[i] = -0.5 * h
                # backward difference of S lives at half node k - 1/2, where A is sampled
                coef = a22_matrix(spec, z + shift)[..., i, i].reshape(-1)
                term = _axis_op(fwd, i, d, n) @ sparse.diags(coef) @ _axis_op(bwd, i, d, n)
            else:
                coef = a22_matrix(spec, z)[..., i, j].reshape(-1)
                if not np.any(coef):
                    continue
                term = _axis_op(cen, i, d, n) @ sparse.diags(coef) @ _axis_op(cen, j, d, n)
            total = total + term
    return total.tocsr()


def a22_on_grid(spec: CovarianceSpec, grid: Grid) -> np.ndarray:
    return a22_matrix(spec, grid.centered_coords())


def sm_operator(spec: CovarianceSpec, grid: Grid):
    if grid.dimension != spec.dimension:
        raise ConfigurationError("z-grid dimension does not match the spec")
    if spec.is_incompressible:
        return divergence_form_operator(spec, grid)
    return diffusion_operator(a22_on_grid(spec, grid), grid)


def sm_stable_dt(spec: CovarianceSpec, grid: Grid, safety: float = 0.9) -> float:
    """Explicit Euler limit from the Gershgorin bound of the operator."""
    A = a22_on_grid(spec, grid)
    d = grid.dimension
    diag = max(float(A[..., i, i].max()) for i in range(d))
    off = sum(float(np.abs(A[..., i, j]).max()) for i in range(d) for j in range(d) if i != j)
    rate = 4 * d * diag / grid.dx**2 + 2 * off / grid.dx**2
    return safety * 2.0 / rate


def solve_sm(
    spec: CovarianceSpec,
    zgrid: Grid,
    T: float,
    S0=None,
    dt: float | None = None,
    record_times=(),
    refine: int = 1,
) -> tuple:
    """Explicit Euler from ``S0`` (default 1) to time ``T``.

    Returns ``(final ZField, list of ZField at record_times)``. ``refine``
    subdivides every step (halved-step refinement studies use ``refine=2``).
    """
    L = sm_operator(spec, zgrid)
    limit = sm_stable_dt(spec, zgrid, safety=1.0)
    dt = sm_stable_dt(spec, zgrid) if dt is None else dt
    dt = dt / refine
    if dt > limit:
        raise ConfigurationError(f"dt = {dt:.4g} exceeds the explicit limit {limit:.4g}")
    s = np.ones(zgrid.size) if S0 is None else np.array(S0, dtype=float).reshape(-1)
    n_steps = int(np.ceil(T / dt - 1e-9))
    dt = T / n_steps if n_steps else dt
    marks = {}
    for tr in record_times:
        marks.setdefault(int(round(tr / dt)), []).append(tr)
    recorded = []
    for k in range(1, n_steps + 1):
        s = s + dt * (L @ s)
        for tr in marks.get(k, ()):
            recorded.append(ZField(zgrid, s.reshape(zgrid.shape).copy(), tr))
    return ZField(zgrid, s.reshape(zgrid.shape), T), recorded


def normalize_chi(values: np.ndarray, grid: Grid, normalization: str = "far-field") -> np.ndarray:
    """``far-field``: value 1 at maximal separation. ``box-mean``: spatial mean 1."""
    if normalization == "far-field":
        return values / values[(grid.n // 2,) * grid.dimension]
    if normalization == "box-mean":
        return values / values.mean()
    raise ValueError(f"unknown normalization {normalization!r}")


def chi_on_grid(spec: CovarianceSpec, grid: Grid, normalization: str = "far-field") -> np.ndarray:
    """Closed-form chi sampled at minimum-image separations, then normalised on the box."""
    raw = chi_closed_form(spec, grid.centered_coords())
    return normalize_chi(raw, grid, normalization)


def solve_chi_numeric(
    spec: CovarianceSpec,
    zgrid: Grid,
    normalization: str = "far-field",
    method: str = "direct",
    tol: float = 1e-10,
    max_time: float = 1e5,
) -> ZField:
    """Invariant density of the separation process on the periodic z-grid.

    ``direct`` solves the singular stationary system with one equation
    replaced by the mass constraint; ``evolve`` runs :func:`solve_sm` until
    the relative change per unit time drops below ``tol``.
    """
    L = sm_operator(spec, zgrid)
    N = zgrid.size
    if method == "direct":
        M = L.tolil()
        M[N - 1, :] = np.ones(N)
        rhs = np.zeros(N)
        rhs[N - 1] = N
        chi = splinalg.spsolve(M.tocsc(), rhs)
        resid = np.abs(L @ chi).max()
        scale = np.abs(L).max() * np.abs(chi).max()
        if not np.all(np.isfinite(chi)) or resid > 1e-8 * scale:
            raise ConvergenceError(f"stationary solve failed: residual {resid:.3g}")
    elif method == "evolve":
        dt = sm_stable_dt(spec, zgrid)
        s = np.ones(N)
        t = 0.0
        chunk = max(1, int(round(1.0 / dt)))
        while True:
            prev = s.copy()
            for _ in range(chunk):
                s = s + dt * (L @ s)
            t += chunk * dt
            change = np.abs(s - prev).max() / (chunk * dt)
            if change < tol:
                break
            if t > max_time:
                raise ConvergenceError(f"no convergence by t = {t:.3g}: change rate {change:.3g}")
        chi = s
    else:
        raise ValueError(f"unknown method {method!r}")
    chi = chi.reshape(zgrid.shape)
    if chi.min() <= 0:
        raise ConvergenceError(f"chi not positive (min {chi.min():.3g})")
    return ZField(zgrid, normalize_chi(chi, zgrid, normalization), np.inf)


def _spectral_derivative(f: np.ndarray, grid: Grid, axes: tuple) -> np.ndarray:
    k = grid.wavevectors
    kd = grid.derivative_wavevectors
    fh = grid.rfft(f)
    if len(axes) == 2 and axes[0] == axes[1]:
        fh = fh * (-(k[..., axes[0]] ** 2))
    else:
        for a in axes:
            fh = fh * (1j * kd[..., a])
    return grid.irfft(fh)


def _fd(f: np.ndarray, h: float, axis: int, second: bool = False) -> np.ndarray:
    if second:
        return (np.roll(f, -1, axis) - 2 * f + np.roll(f, 1, axis)) / h**2
    return (np.roll(f, -1, axis) - np.roll(f, 1, axis)) / (2 * h)


def stationarity_residual(chi: ZField, spec: CovarianceSpec) -> float:
    """Sup-norm of ``tr[D^2 (A22 chi)]`` in expanded form.

    ``sum_ij [A_ij d_ij chi + 2 d_i A_ij d_j chi + chi d_ij A_ij]`` with
    centred differences on chi and spectral derivatives of the smooth
    coefficient field, so the residual of a smooth exact solution is
    second order in the mesh size.
    """
    g = chi.grid
    d, h = g.dimension, g.dx
    A = a22_on_grid(spec, g)
    c = chi.values
    res = np.zeros(g.shape)
    for i in range(d):
        for j in range(d):
            Aij = A[..., i, j]
            if i == j:
                dij_c = _fd(c, h, i, second=True)
            else:
                dij_c = _fd(_fd(c, h, i), h, j)
            res += Aij * dij_c
            res += 2 * _spectral_derivative(Aij, g, (i,)) * _fd(c, h, j)
            res += c * _spectral_derivative(Aij, g, (i, j))
    return float(np.abs(res).max())


# ----- Monte Carlo cross-check ---------------------------------------------------------


@dataclass
class CrossCheckReport:
    centers: np.ndarray  # bin centres of the Z histogram
    mc_density: np.ndarray
    mc_stderr: np.ndarray
    pde_density: np.ndarray
    scheme_error: float
    sup_discrepancy: float
    budget: float
    mc_var: float  # second moment E[Z(T)^2] (the "variance" about zero separation)
    mc_var_stderr: float
    pde_var: float
    replicas: int

    @property
    def density_ok(self) -> bool:
        return self.sup_discrepancy <= 3 * self.budget

    @property
    def variance_ok(self) -> bool:
        return abs(self.mc_var - self.pde_var) <= 3 * self.mc_var_stderr


def gaussian_bump(grid: Grid, center, width: float) -> np.ndarray:
    """Periodised normalised Gaussian bump on the z-grid."""
    d = grid.dimension
    c = np.asarray(center, dtype=float).reshape(d)
    out = np.zeros(grid.shape)
    shifts = np.array(np.meshgrid(*([[-1, 0, 1]] * d), indexing="ij")).reshape(d, -1).T
    z = grid.wrap_centered(grid.coords() - c)
    for s in shifts:
        y = z + s * grid.length
        out += np.exp(-0.5 * np.sum(y * y, axis=-1) / width**2)
    return out / ((2 * np.pi * width**2) ** (d / 2))


def mc_cross_check(
    spec: CovarianceSpec,
    zgrid: Grid,
    replicas,
    T: float,
    pairs: int = 1000,
    z0: float = 2.0,
    width: float = 0.5,
    dt: float | None = None,
    master_seed: int = 0,
    bins: int | None = None,
    chunk: int = 20,
    min_replicas: int = 200,
) -> CrossCheckReport:
    """Histogram of the pair separation ``Z(T)`` against the PDE solution (d = 1).

    Each replica carries ``pairs`` particle pairs sharing the replica's
    environment: ``W`` uniform on the box, ``Z(0) ~ N(z0, width^2)``,
    ``X = W + Z/2``, ``Y = W - Z/2``. Uniform ``W`` makes the separation
    marginal an exact solution of the z-equation on the torus. Errors come
    from the spread of per-replica histograms.
    """
    from . import flow
    from .fieldsynth import Environment, default_dt

    replicas = list(replicas)
    if len(replicas) < min_replicas:
        raise InsufficientReplicas(f"need at least {min_replicas} replicas, got {len(replicas)}")
    if spec.dimension != 1:
        raise ConfigurationError("mc_cross_check is implemented for d = 1")
    grid = zgrid
    dt = default_dt(spec, grid) if dt is None else dt
    env = Environment(spec, grid, dt, master_seed)
    n_steps = int(round(T / dt))
    T = n_steps * dt
    L = grid.length
    bins = bins or grid.n // 4
    edges = np.linspace(-L / 2, L / 2, bins + 1)
    width_bin = edges[1] - edges[0]
    hist, var = [], []
    for s in range(0, len(replicas), chunk):
        ens = []
        for r in replicas[s : s + chunk]:
            g0 = np.random.default_rng([master_seed, 7, r])
            w = g0.uniform(0, L, pairs)
            z = z0 + width * g0.standard_normal(pairs)
            pos = np.concatenate([w + z / 2, w - z / 2])[:, None]
            ens.append(flow.make_ensemble(pos, r, dt, master_seed, tag="pairs"))
        ens = flow.advance(env, ens, n_steps)
        for e in ens:
            zz = grid.wrap_centered(e.positions[:pairs, 0] - e.positions[pairs:, 0])
            h, _ = np.histogram(zz, bins=edges)
            hist.append(h / (pairs * width_bin))
            var.append(np.mean(zz**2))
    hist = np.array(hist)
    R = len(hist)
    mc = hist.mean(axis=0)
    mc_se = hist.std(axis=0, ddof=1) / np.sqrt(R)

    S0 = gaussian_bump(grid, z0, width)
    fine = Grid(1, grid.n * 2, L)
    S_T = solve_sm(spec, grid, T, S0=S0)[0].values
    S_T_fine = solve_sm(spec, fine, T, S0=gaussian_bump(fine, z0, width))[0].values
    pde = _bin_average(grid, S_T, edges)
    pde_fine = _bin_average(fine, S_T_fine, edges)
    scheme_err = float(np.abs(pde - pde_fine).max())
    zc = grid.centered_coords()[..., 0]
    pde_var = float(np.sum(zc**2 * S_T) * grid.dx)
    var = np.array(var)
    disc = float(np.abs(mc - pde).max())
    budget = float(mc_se.max()) + scheme_err
    return CrossCheckReport(
        0.5 * (edges[1:] + edges[:-1]), mc, mc_se, pde, scheme_err, disc, budget,
        float(var.mean()), float(var.std(ddof=1) / np.sqrt(R)), pde_var, R,
    )


def _bin_average(grid: Grid, S: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Average of the band-limited interpolant of ``S`` over each bin (exact in Fourier space)."""
    k = grid.wavevectors[..., 0]
    Sh = grid.rfft(S)
    out = np.empty(len(edges) - 1)
    width = edges[1] - edges[0]
    centers = 0.5 * (edges[1:] + edges[:-1])
    # bin average of exp(ikz) is exp(ik c) sinc(k w / 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        sinc = np.where(k == 0, 1.0, np.sin(k * width / 2) / (k * width / 2))
    mult = np.where((k == 0) | (np.arange(k.size) == grid.n // 2), 1.0, 2.0)
    coef = Sh * sinc * mult / grid.size
    out[:] = np.real(np.exp(1j * np.outer(centers, k)) @ coef)
    return out


# ----- full two-particle equation in (w, z), d = 1 ------------------------------------


def pair_grid_operator(spec: CovarianceSpec, n: int, length: float):
    """Operator of the joint (centre of mass, separation) equation on an ``n x n`` periodic grid.

    Axis 0 is ``w``, axis 1 is ``z``; coefficients depend on ``z`` only.
    """
    if spec.dimension != 1:
        raise ConfigurationError("the joint (w, z) equation is implemented for d = 1 only")
    g2 = Grid(2, n, length)
    z = Grid(1, n, length).centered_coords()[..., 0]
    A = a_matrix(spec, z[:, None])  # (n, 2, 2)
    field = np.broadcast_to(A[None], (n, n, 2, 2))
    return diffusion_operator(np.ascontiguousarray(field), g2), g2


def solve_pair_pde(spec: CovarianceSpec, n: int, length: float, T: float, Q0: np.ndarray, dt: float | None = None) -> np.ndarray:
    """Evolve the joint density ``Q(w, z)``; returns the terminal ``(n, n)`` array."""
    op, g2 = pair_grid_operator(spec, n, length)
    zg = Grid(1, n, length)
    dt = sm_stable_dt(spec, zg) / 2 if dt is None else dt
    n_steps = int(np.ceil(T / dt - 1e-9))
    dt = T / n_steps
    q = np.array(Q0, dtype=float).reshape(-1)
    for _ in range(n_steps):
        q = q + dt * (op @ q)
    return q.reshape(n, n)


# ----- Gaussian envelope -------------------------------------------------------------


def envelope(C: float, t: float, dz: np.ndarray, d: int) -> np.ndarray:
    return C * t ** (-d / 2) * np.exp(-np.sum(dz * dz, axis=-1) / (C * t))


def fit_envelope_constant(snapshots: list, center, C_max: float = 1e3) -> float:
    """Smallest ``C`` with ``S(t, z) <= C t^{-d/2} exp(-|z - z0|^2 / (C t))`` on all snapshots."""
    from scipy.optimize import brentq

    def worst(C):
        return max(float(np.max(s.values - envelope(C, s.time, _disp(s.grid, center), s.grid.dimension))) for s in snapshots)

    lo, hi = 1e-3, 1.0
    while worst(hi) > 0:
        hi *= 2
        if hi > C_max:
            raise ConvergenceError("no dominating envelope constant below C_max")
    if worst(lo) <= 0:
        return lo
    return brentq(worst, lo, hi, xtol=1e-10) * (1 + 1e-9)


def envelope_violation(snapshot: ZField, C: float, center) -> float:
    """Largest excess over the envelope, as a fraction of the snapshot's peak."""
    env = envelope(C, snapshot.time, _disp(snapshot.grid, center), snapshot.grid.dimension)
    return float(max(0.0, np.max(snapshot.values - env)) / np.max(snapshot.values))


def _disp(grid: Grid, center) -> np.ndarray:
    c = np.asarray(center, dtype=float).reshape(grid.dimension)
    return grid.wrap_centered(grid.coords() - c)
