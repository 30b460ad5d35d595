"""Velocity covariance kernels and the objects derived from them.

Three kernel families are supported, all Gaussian in both physical and
spectral space:

``isotropic-scalar``
    ``R(z) = f(z) I`` with ``f(z) = sigma2 * exp(-|z|^2 / (2 ell^2))``.
``incompressible``
    spectral density ``c (ell |k|)^2 exp(-ell^2 |k|^2 / 2) (I - k k^T / |k|^2)``.
``potential``
    spectral density ``c (ell |k|)^2 exp(-ell^2 |k|^2 / 2) k k^T / |k|^2``.

The ``|k|^2`` factor in the projection families removes the discontinuity of
the projector at ``k = 0``; without it the physical-space kernels decay only
like ``|z|^{-d}``. With it they are derivatives of a Gaussian:

    incompressible: R(z) = s exp(-x) [(d - 1 - r^2/ell^2) I + z z^T / ell^2] / (d - 1)
    potential:      R(z) = s exp(-x) [I - z z^T / ell^2]

with ``x = r^2 / (2 ell^2)`` and ``s = sigma2``, so ``tr R(0) = d sigma2`` for all families.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import pi

import numpy as np

FAMILIES = ("isotropic-scalar", "incompressible", "potential")


class ConfigurationError(ValueError):
    """Raised for parameter combinations that cannot be simulated."""


class InsufficientReplicas(ConfigurationError):
    """Too few environment replicas for the requested statistic."""


@dataclass(frozen=True)
class CovarianceSpec:
    dimension: int = 1
    nu: float = 1.0
    family: str = "isotropic-scalar"
    sigma2: float = 0.5
    corr_length: float = 1.0
    support_radius: float | None = None

    def __post_init__(self):
        if self.support_radius is None:
            object.__setattr__(self, "support_radius", 4.0 * self.corr_length)
        self.validate()

    def validate(self) -> None:
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise ConfigurationError(f"dimension must be a positive integer, got {self.dimension}")
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if not self.nu > 0:
            raise ConfigurationError("nu must be positive")
        if self.sigma2 < 0:
            raise ConfigurationError("sigma2 must be nonnegative")
        if not self.corr_length > 0:
            raise ConfigurationError("corr_length must be positive")
        if self.support_radius < 4.0 * self.corr_length * (1 - 1e-12):
            raise ConfigurationError("support_radius must be at least 4 * corr_length")
        if self.family != "isotropic-scalar" and self.dimension == 1:
            raise ConfigurationError(
                f"family {self.family!r} is degenerate in d=1 (no nontrivial divergence-free "
                "or distinct curl-free fields); use isotropic-scalar"
            )

    @property
    def is_incompressible(self) -> bool:
        return self.family == "incompressible" or self.sigma2 == 0.0


def _as_points(spec: CovarianceSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if spec.dimension == 1 and (z.ndim == 0 or z.shape[-1] != 1):
        z = z[..., None]
    if z.shape[-1] != spec.dimension:
        raise ValueError(f"points must have trailing dimension {spec.dimension}, got shape {z.shape}")
    return z


def eval_R(spec: CovarianceSpec, z) -> np.ndarray:
    """Covariance matrix ``R(z)``; ``z`` has shape ``(..., d)``, result ``(..., d, d)``."""
    z = _as_points(spec, z)
    d = spec.dimension
    eye = np.eye(d)
    if spec.sigma2 == 0.0:
        return np.zeros(z.shape[:-1] + (d, d))
    if spec.family == "isotropic-scalar":
        f = scalar_profile(spec, z)
        return f[..., None, None] * eye
    ell2 = spec.corr_length**2
    r2 = np.sum(z * z, axis=-1)
    env = spec.sigma2 * np.exp(-r2 / (2.0 * ell2))
    zz = z[..., :, None] * z[..., None, :] / ell2
    if spec.family == "potential":
        return env[..., None, None] * (eye - zz)
    diag = (d - 1 - r2 / ell2)[..., None, None] * eye
    return (env / (d - 1))[..., None, None] * (diag + zz)


def scalar_profile(spec: CovarianceSpec, z) -> np.ndarray:
    """``f(z)`` for the isotropic-scalar family."""
    if spec.family != "isotropic-scalar":
        raise ConfigurationError("scalar_profile is defined only for the isotropic-scalar family")
    z = _as_points(spec, z)
    r2 = np.sum(z * z, axis=-1)
    return spec.sigma2 * np.exp(-r2 / (2.0 * spec.corr_length**2))


def div_R(spec: CovarianceSpec, z) -> np.ndarray:
    """Vector with components ``sum_i d R_ij / d x_i`` at ``z``.

    Scalar family: ``grad f``. Potential family:
    ``sigma2 exp(-x) z (r^2/ell^2 - d - 2) / ell^2``. Incompressible: zero,
    since ``k_i P_ij(k) = 0`` for the transverse projector.
    """
    z = _as_points(spec, z)
    if spec.family == "incompressible" or spec.sigma2 == 0.0:
        return np.zeros_like(z)
    ell2 = spec.corr_length**2
    r2 = np.sum(z * z, axis=-1)
    env = spec.sigma2 * np.exp(-r2 / (2.0 * ell2))
    if spec.family == "isotropic-scalar":
        return -env[..., None] * z / ell2
    d = spec.dimension
    return (env * (r2 / ell2 - d - 2) / ell2)[..., None] * z


def effective_diffusivity(spec: CovarianceSpec) -> np.ndarray:
    """``nu I + R(0)``: covariance rate of the annealed Brownian motion."""
    d = spec.dimension
    return spec.nu * np.eye(d) + eval_R(spec, np.zeros(d))


def a22_matrix(spec: CovarianceSpec, z) -> np.ndarray:
    """Diffusion matrix of the separation process: ``nu I + R(0) - (R(z) + R(z)^T) / 2``."""
    Rz = eval_R(spec, z)
    return effective_diffusivity(spec) - 0.5 * (Rz + np.swapaxes(Rz, -1, -2))


def a_matrix(spec: CovarianceSpec, z) -> np.ndarray:
    """Full ``2d x 2d`` generator matrix in (center of mass, separation) coordinates."""
    d = spec.dimension
    Rz = eval_R(spec, z)
    RzT = np.swapaxes(Rz, -1, -2)
    a0 = effective_diffusivity(spec)
    out = np.empty(Rz.shape[:-2] + (2 * d, 2 * d))
    out[..., :d, :d] = 0.25 * a0 + 0.125 * (Rz + RzT)
    out[..., :d, d:] = 0.25 * (RzT - Rz)
    out[..., d:, :d] = 0.25 * (Rz - RzT)
    out[..., d:, d:] = a0 - 0.5 * (Rz + RzT)
    return out


def chi_closed_form(spec: CovarianceSpec, z) -> np.ndarray:
    """Invariant density ``(nu + f(0)) / (nu + f(0) - f(z))`` of the separation process."""
    if spec.family != "isotropic-scalar":
        raise ConfigurationError(
            f"no closed form for family {spec.family!r}; use moment2.solve_chi_numeric"
        )
    f = scalar_profile(spec, z)
    top = spec.nu + spec.sigma2
    return top / (top - f)


def spectral_profile_amplitude(spec: CovarianceSpec) -> float:
    """Prefactor ``c`` of the spectral profile (continuous-transform convention).

    Scalar: ``g(k) = c exp(-ell^2 |k|^2 / 2)``; projection families:
    ``g(k) = c (ell |k|)^2 exp(-ell^2 |k|^2 / 2)``.
    """
    d = spec.dimension
    ell = spec.corr_length
    base = (ell**2 / (2 * pi)) ** (d / 2)
    if spec.family == "isotropic-scalar":
        return spec.sigma2 * base
    if spec.family == "potential":
        return spec.sigma2 * base
    return spec.sigma2 * base / (d - 1)


def spectral_density(spec: CovarianceSpec, k, cell: float = 1.0) -> np.ndarray:
    """Matrix spectral density at wavevectors ``k`` of shape ``(..., d)``.

    Convention: ``R(z) = int S(k) exp(i k.z) dk``. Passing ``cell`` equal to
    the reciprocal-lattice cell volume ``(2 pi / L)^d`` returns the discrete
    weights whose plain sum over the lattice reproduces ``R(0)``.
    """
    k = _as_points(spec, k)
    d = spec.dimension
    ell2 = spec.corr_length**2
    k2 = np.sum(k * k, axis=-1)
    g = cell * spectral_profile_amplitude(spec) * np.exp(-0.5 * ell2 * k2)
    eye = np.eye(d)
    if spec.family == "isotropic-scalar":
        return g[..., None, None] * eye
    # (ell |k|)^2 times the projector; kk^T carries the |k|^2 already
    kk = ell2 * k[..., :, None] * k[..., None, :]
    if spec.family == "potential":
        return g[..., None, None] * kk
    return g[..., None, None] * (ell2 * k2[..., None, None] * eye - kk)
