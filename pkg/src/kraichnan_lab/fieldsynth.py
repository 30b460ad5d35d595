"""Spectral synthesis of white-in-time Gaussian velocity increments on a periodic box.

Each increment ``dV`` is drawn by colouring real white noise in Fourier space:
``dV_hat(k) = sqrt(N * S_k * dt) * P(k) xi_hat(k)`` where ``S_k`` is the
discrete spectral weight of :func:`covariance.spectral_density` and ``P`` is
the identity (scalar family) or the unit projector. The grid covariance is
then exactly ``sum_k S_k dt exp(i k.(x - y))``, the periodised ``R(x - y) dt``.
Nyquist modes are dropped so that spectral derivatives are unambiguous.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from math import pi

import numpy as np
from scipy import fft as sfft

from . import kernels
from .covariance import ConfigurationError, CovarianceSpec, spectral_density
from .rng import BLOCK_STEPS, RngStream

# per-replica normal draws are generated in blocks of at most this many numbers
_BLOCK_ELEMENTS = 1 << 17


@dataclass(frozen=True)
class Grid:
    dimension: int
    n: int
    length: float

    def __post_init__(self):
        if self.n < 4 or self.n & (self.n - 1):
            raise ConfigurationError(f"points_per_side must be a power of two >= 4, got {self.n}")
        if not self.length > 0:
            raise ConfigurationError("box_length must be positive")

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dimension

    @property
    def rshape(self) -> tuple:
        return (self.n,) * (self.dimension - 1) + (self.n // 2 + 1,)

    @property
    def size(self) -> int:
        return self.n**self.dimension

    @property
    def cell_volume(self) -> float:
        return self.dx**self.dimension

    @property
    def axes(self) -> tuple:
        return tuple(range(-self.dimension, 0))

    def coords(self) -> np.ndarray:
        """Node coordinates in ``[0, L)``, shape ``(*shape, d)``."""
        x = np.arange(self.n) * self.dx
        mesh = np.meshgrid(*([x] * self.dimension), indexing="ij")
        return np.stack(mesh, axis=-1)

    def centered_coords(self) -> np.ndarray:
        """Node coordinates wrapped to ``[-L/2, L/2)`` (minimum-image displacement from 0)."""
        return self.wrap_centered(self.coords())

    def wrap_centered(self, x):
        L = self.length
        return (np.asarray(x) + 0.5 * L) % L - 0.5 * L

    @cached_property
    def wavevectors(self) -> np.ndarray:
        """Wavevectors in the ``rfftn`` layout, shape ``(*rshape, d)``."""
        k_full = 2 * pi * np.fft.fftfreq(self.n, d=self.dx)
        k_half = 2 * pi * np.fft.rfftfreq(self.n, d=self.dx)
        axes = [k_full] * (self.dimension - 1) + [k_half]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        """True where any component sits on the Nyquist frequency."""
        nyq = self.n // 2
        idx_full = np.arange(self.n)
        idx_half = np.arange(self.n // 2 + 1)
        axes = [idx_full] * (self.dimension - 1) + [idx_half]
        mesh = np.meshgrid(*axes, indexing="ij")
        mask = np.zeros(self.rshape, dtype=bool)
        for m in mesh:
            mask |= m == nyq
        return mask

    @cached_property
    def derivative_wavevectors(self) -> np.ndarray:
        """Wavevectors for first derivatives: Nyquist entries zeroed."""
        k = self.wavevectors.copy()
        k[self.nyquist_mask] = 0.0
        return k

    @cached_property
    def spline_symbol(self) -> np.ndarray:
        """DFT of the cubic B-spline sampled at nodes, ``prod_i (2 + cos(k_i dx)) / 3``."""
        return np.prod((2.0 + np.cos(self.wavevectors * self.dx)) / 3.0, axis=-1)

    def rfft(self, a):
        return sfft.rfftn(a, axes=self.axes)

    def irfft(self, a):
        return sfft.irfftn(a, s=self.shape, axes=self.axes)


def check_resolution(spec: CovarianceSpec, grid: Grid, box_ratio: float = 8.0, per_corr: float = 4.0) -> None:
    """Box must dwarf the kernel support and the mesh must resolve ``corr_length``."""
    if grid.dimension != spec.dimension:
        raise ConfigurationError(f"grid dimension {grid.dimension} != spec dimension {spec.dimension}")
    if grid.length < box_ratio * spec.support_radius * (1 - 1e-12):
        raise ConfigurationError(
            f"box_length {grid.length} < {box_ratio:g} * support_radius = {box_ratio * spec.support_radius}"
        )
    if grid.dx > spec.corr_length / per_corr * (1 + 1e-12):
        raise ConfigurationError(
            f"dx = {grid.dx} does not resolve corr_length/{per_corr:g} = {spec.corr_length / per_corr}"
        )


def block_steps(grid: Grid, ncomp: int) -> int:
    per_step = ncomp * grid.size
    return max(1, min(BLOCK_STEPS, _BLOCK_ELEMENTS // per_step))


@dataclass(frozen=True)
class FieldIncrement:
    """One time-step realisation ``V(dt, .)`` on the grid (already scaled by ``sqrt(dt)``).

    ``spectrum`` holds the ``rfftn`` coefficients, shape ``(d, *rshape)``.
    """

    grid: Grid
    spectrum: np.ndarray
    dt: float
    replica: int = -1
    step: int = -1

    @cached_property
    def values(self) -> np.ndarray:
        return self.grid.irfft(self.spectrum)

    @cached_property
    def spline_coeffs(self) -> np.ndarray:
        return self.grid.irfft(self.spectrum / self.grid.spline_symbol)

    def divergence(self) -> np.ndarray:
        """Spectral divergence on the grid."""
        k = self.grid.derivative_wavevectors
        div_hat = sum(1j * k[..., i] * self.spectrum[i] for i in range(self.grid.dimension))
        return self.grid.irfft(div_hat)

    @classmethod
    def from_values(cls, grid: Grid, values: np.ndarray, dt: float, replica: int = -1, step: int = -1):
        """Wrap physical-space values (test injection, loaded dumps)."""
        values = np.asarray(values, dtype=float)
        return cls(grid, grid.rfft(values), dt, replica, step)


@dataclass(frozen=True)
class IncrementBatch:
    """Increments for several replicas at one time slot; ``spectrum`` is ``(R, d, *rshape)``."""

    grid: Grid
    spectrum: np.ndarray
    dt: float
    replicas: tuple
    step: int

    @cached_property
    def values(self) -> np.ndarray:
        return self.grid.irfft(self.spectrum)

    def __getitem__(self, i: int) -> FieldIncrement:
        return FieldIncrement(self.grid, self.spectrum[i], self.dt, self.replicas[i], self.step)

    def __len__(self):
        return len(self.replicas)


@lru_cache(maxsize=32)
def _colouring(spec: CovarianceSpec, grid: Grid):
    """Amplitude ``sqrt(N S_k)`` per mode and (projection families) the unit projector."""
    cell = (2 * pi / grid.length) ** grid.dimension
    k = grid.wavevectors
    S = spectral_density(spec, k, cell=cell)
    if spec.family == "isotropic-scalar":
        weight = S[..., 0, 0]
        proj = None
    else:
        weight = np.trace(S, axis1=-2, axis2=-1)  # g(k) times tr P = g(k) * rank
        rank = 1 if spec.family == "potential" else spec.dimension - 1
        weight = weight / rank
        with np.errstate(invalid="ignore", divide="ignore"):
            proj = np.where(weight[..., None, None] > 0, S / weight[..., None, None], 0.0)
        zero = np.sum(k * k, axis=-1) == 0
        proj[zero] = 0.0
    amp = np.sqrt(np.clip(weight, 0.0, None) * grid.size)
    amp[grid.nyquist_mask] = 0.0
    return amp, proj


def colour_noise(spec: CovarianceSpec, grid: Grid, white: np.ndarray, dt: float) -> np.ndarray:
    """Map white noise ``(..., d, *shape)`` to increment spectra ``(..., d, *rshape)``."""
    amp, proj = _colouring(spec, grid)
    xi = grid.rfft(white) * (amp * np.sqrt(dt))
    if proj is None:
        return xi
    d = grid.dimension
    # move component axis last for the matrix product
    xi = np.moveaxis(xi, -d - 1, -1)
    out = np.einsum("...ij,...j->...i", proj, xi)
    return np.moveaxis(out, -1, -d - 1)


def synthesize_increment(
    spec: CovarianceSpec, grid: Grid, dt: float, rng: np.random.Generator | RngStream, slot: int = 0
) -> FieldIncrement:
    """Draw one increment with covariance ``R(x - y) dt`` on the grid.

    ``rng`` is either a numpy ``Generator`` (fresh draws, advancing it) or an
    :class:`RngStream` addressed by ``slot``.
    """
    check_resolution(spec, grid)
    d = grid.dimension
    if spec.sigma2 == 0.0:
        return FieldIncrement(grid, np.zeros((d,) + grid.rshape, dtype=complex), dt)
    if isinstance(rng, RngStream):
        white = rng.normals(slot)
        replica = rng.replica_index
    else:
        white = rng.standard_normal((d,) + grid.shape)
        replica, slot = -1, -1
    return FieldIncrement(grid, colour_noise(spec, grid, white, dt), dt, replica, slot)


@dataclass
class Environment:
    """Velocity environment for a set of replicas, addressable by time slot.

    Slot ``k`` covers model time ``[k dt, (k + 1) dt)``. The same
    (master seed, replica, slot) always yields the same increment, which is
    what lets separate solver runs share noise on overlapping intervals.
    """

    spec: CovarianceSpec
    grid: Grid
    dt: float
    master_seed: int = 0
    purpose: str = "env"
    _streams: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        check_resolution(self.spec, self.grid)
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")

    def stream(self, replica: int) -> RngStream:
        s = self._streams.get(replica)
        if s is None:
            d = self.grid.dimension
            s = RngStream(
                self.master_seed,
                replica,
                self.purpose,
                shape=(d,) + self.grid.shape,
                block_steps=block_steps(self.grid, d),
            )
            self._streams[replica] = s
        return s

    def increment(self, replica: int, step: int) -> FieldIncrement:
        return synthesize_increment(self.spec, self.grid, self.dt, self.stream(replica), step)

    def batch(self, replicas, step: int) -> IncrementBatch:
        replicas = tuple(int(r) for r in replicas)
        d = self.grid.dimension
        if self.spec.sigma2 == 0.0:
            spec_arr = np.zeros((len(replicas), d) + self.grid.rshape, dtype=complex)
        else:
            white = np.stack([self.stream(r).normals(step) for r in replicas])
            spec_arr = colour_noise(self.spec, self.grid, white, self.dt)
        return IncrementBatch(self.grid, spec_arr, self.dt, replicas, int(step))


def interpolate_velocity(inc: FieldIncrement, x, method: str = "spline") -> np.ndarray:
    """Increment at off-grid points ``x`` of shape ``(N, d)``; returns ``(N, d)``.

    ``spline`` uses periodic cubic B-splines with exact spectral prefiltering
    (interpolating: exact at nodes, reproduces constants); ``fourier`` sums the
    band-limited Fourier series exactly at O(N n^d) cost.
    """
    grid = inc.grid
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if grid.dimension == 1 and x.shape[-1] != 1:
        x = x.reshape(-1, 1)
    if method == "spline":
        return kernels.spline_eval(inc.spline_coeffs, x, grid.dx)
    if method == "fourier":
        return fourier_eval(grid, inc.spectrum, x)
    raise ValueError(f"unknown interpolation method {method!r}")


def fourier_eval(grid: Grid, spectrum: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Exact trigonometric interpolant of ``rfftn`` data ``(m, *rshape)`` at points ``(N, d)``."""
    spectrum = np.asarray(spectrum)
    k = grid.wavevectors.reshape(-1, grid.dimension)
    coef = spectrum.reshape(spectrum.shape[0], -1)
    # rfft halves the last axis: interior columns stand for a +k / -k pair
    kl = grid.wavevectors[..., -1].reshape(-1)
    nyq = grid.n // 2
    last_idx = np.round(kl / (2 * pi / grid.length)).astype(int)
    mult = np.where((last_idx == 0) | (last_idx == nyq), 1.0, 2.0)
    out = np.empty((x.shape[0], coef.shape[0]))
    chunk = max(1, (1 << 22) // max(1, k.shape[0]))
    for s in range(0, x.shape[0], chunk):
        phase = np.exp(1j * (x[s : s + chunk] @ k.T))
        out[s : s + chunk] = np.real(phase @ (coef * mult).T) / grid.size
    return out


def max_wavenumber_sq(grid: Grid) -> float:
    return grid.dimension * (pi / grid.dx) ** 2


def stability_limit(spec: CovarianceSpec, grid: Grid, scheme: str = "explicit") -> float:
    """Largest mean-square stable step for the grid SPDE.

    Explicit Euler: the top Fourier mode gains ``(a k^2 dt / 2)^2`` from the
    diffusion update while the transport noise pumps ``R(0) k^2 dt`` back, so
    stability needs ``dt < 4 nu / (a^2 k_max^2)``. The exponential integrator
    needs ``exp(-x) + rho x < 1`` with ``x = a k_max^2 dt`` and
    ``rho = 1 - nu / a``.
    """
    from scipy.optimize import brentq

    from .covariance import effective_diffusivity

    lam = float(np.linalg.eigvalsh(effective_diffusivity(spec)).max())
    k2 = max_wavenumber_sq(grid)
    if scheme == "explicit":
        return 4.0 * spec.nu / (lam**2 * k2)
    if scheme == "etd":
        rho = 1.0 - spec.nu / lam
        if rho <= 0:
            return np.inf
        xstar = brentq(lambda x: np.exp(-x) + rho * x - 1.0, 1e-9, 2.0 / rho)
        return xstar / (lam * k2)
    raise ValueError(f"unknown scheme {scheme!r}")


def default_dt(spec: CovarianceSpec, grid: Grid, scheme: str = "explicit") -> float:
    """Diffusive limit, quarter-cell advection per step, and 0.9 of the stability limit."""
    from .covariance import effective_diffusivity

    lam = float(np.linalg.eigvalsh(effective_diffusivity(spec)).max())
    dx = grid.dx
    dt = dx**2 / (4 * grid.dimension * lam)
    if spec.sigma2 > 0:
        dt = min(dt, (dx / (4 * np.sqrt(spec.sigma2))) ** 2)
    return min(dt, 0.9 * stability_limit(spec, grid, scheme))


def write_binary(path, grid: Grid, values: np.ndarray, dt: float) -> None:
    """Flat dump: magic ``KLF1``, int32 d, int32 n, float64 L, float64 dt, int32 ncomp, then
    ``ncomp * n^d`` little-endian float64 values in row-major (component, axis 0, ..., axis d-1) order."""
    values = np.asarray(values, dtype="<f8")
    ncomp = values.size // grid.size
    if ncomp * grid.size != values.size:
        raise ValueError("values do not match the grid")
    with open(path, "wb") as fh:
        fh.write(b"KLF1")
        fh.write(np.array([grid.dimension, grid.n], dtype="<i4").tobytes())
        fh.write(np.array([grid.length, dt], dtype="<f8").tobytes())
        fh.write(np.array([ncomp], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(values).tobytes())


def read_binary(path):
    """Inverse of :func:`write_binary`; returns ``(grid, values, dt)`` with values ``(ncomp, *shape)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != b"KLF1":
        raise ValueError(f"{path}: not a field dump")
    d, n = np.frombuffer(raw, "<i4", 2, 4)
    L, dt = np.frombuffer(raw, "<f8", 2, 12)
    (ncomp,) = np.frombuffer(raw, "<i4", 1, 28)
    grid = Grid(int(d), int(n), float(L))
    values = np.frombuffer(raw, "<f8", int(ncomp) * grid.size, 32).reshape((int(ncomp),) + grid.shape)
    return grid, values.copy(), float(dt)


@dataclass
class IncrementStats:
    lags: np.ndarray  # separations along the first axis
    empirical: np.ndarray  # (n_lags, d, d) estimate of E[dV_i(x) dV_j(x + z)]
    stderr: np.ndarray
    expected: np.ndarray  # R(z) dt
    max_divergence: float
    draws: int

    def zscores(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            z = (self.empirical - self.expected) / self.stderr
        return np.where(self.stderr > 0, z, 0.0)


def increment_statistics(
    spec: CovarianceSpec,
    grid: Grid,
    dt: float,
    draws: int = 10_000,
    lags=(0.0, 0.5, 1.0, 2.0),
    master_seed: int = 0,
    chunk: int = 250,
) -> IncrementStats:
    """Empirical increment covariance at separations ``lags`` (along axis 0) over independent draws.

    Each draw contributes its spatial average of ``dV_i(x) dV_j(x + z)``;
    draws are independent, so the standard error is the spread of those
    averages over ``sqrt(draws)``.
    """
    from .covariance import eval_R

    check_resolution(spec, grid)
    d = grid.dimension
    lags = np.asarray(lags, dtype=float)
    shifts = np.round(lags / grid.dx).astype(int)
    if not np.allclose(shifts * grid.dx, lags):
        raise ConfigurationError("lags must be multiples of dx")
    samples = np.empty((draws, len(lags), d, d))
    max_div = 0.0
    stream = RngStream(master_seed, 0, "synth-check", shape=(chunk, d) + grid.shape, block_steps=1)
    k = grid.derivative_wavevectors
    for c, s in enumerate(range(0, draws, chunk)):
        m = min(chunk, draws - s)
        spec_arr = colour_noise(spec, grid, stream.normals(c)[:m], dt)
        vals = grid.irfft(spec_arr)  # (m, d, *shape)
        div_hat = sum(1j * k[..., i] * spec_arr[:, i] for i in range(d))
        max_div = max(max_div, float(np.abs(grid.irfft(div_hat)).max()))
        for li, sh in enumerate(shifts):
            shifted = np.roll(vals, -sh, axis=2)
            flat_a = vals.reshape(m, d, -1)
            flat_b = shifted.reshape(m, d, -1)
            samples[s : s + m, li] = np.einsum("mip,mjp->mij", flat_a, flat_b) / grid.size
    zpts = np.zeros((len(lags), d))
    zpts[:, 0] = lags
    return IncrementStats(
        lags,
        samples.mean(axis=0),
        samples.std(axis=0, ddof=1) / np.sqrt(draws),
        eval_R(spec, zpts) * dt,
        max_div,
        draws,
    )
