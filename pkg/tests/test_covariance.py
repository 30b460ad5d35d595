from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kraichnan_lab.covariance import (
    ConfigurationError,
    CovarianceSpec,
    a22_matrix,
    a_matrix,
    chi_closed_form,
    div_R,
    effective_diffusivity,
    eval_R,
    spectral_density,
)
from kraichnan_lab.fieldsynth import Grid

FAMILIES = [("isotropic-scalar", 1), ("isotropic-scalar", 2), ("incompressible", 2), ("potential", 2)]


def test_zero_amplitude_is_zero_kernel():
    spec = CovarianceSpec(1, 1.0, "isotropic-scalar", 0.0, 1.0)
    assert np.all(eval_R(spec, np.linspace(-3, 3, 11)) == 0.0)


def test_scalar_value_at_origin(scalar1):
    assert eval_R(scalar1, 0.0)[0, 0] == 0.5


def test_scalar_gradient_value():
    spec = CovarianceSpec(1, 1.0, "isotropic-scalar", 1.0, 1.0)
    assert div_R(spec, 1.0)[0] == pytest.approx(-np.exp(-0.5), rel=1e-14)
    h = 1e-5
    fd = (eval_R(spec, 1 + h)[0, 0] - eval_R(spec, 1 - h)[0, 0]) / (2 * h)
    assert div_R(spec, 1.0)[0] == pytest.approx(fd, rel=1e-8)
    assert np.all(div_R(spec, 0.0) == 0.0)


@pytest.mark.parametrize("family,d", FAMILIES)
def test_divergence_matches_finite_differences(family, d):
    spec = CovarianceSpec(d, 1.0, family, 0.5, 1.0)
    z = np.random.default_rng(1).uniform(-3, 3, size=(100, d))
    h = 1e-5
    fd = np.zeros((100, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        fd += (eval_R(spec, z + e)[:, i, :] - eval_R(spec, z - e)[:, i, :]) / (2 * h)
    assert np.abs(fd - div_R(spec, z)).max() < 1e-8
    if family == "incompressible":
        assert np.abs(fd).max() < 1e-6 * spec.sigma2 / spec.corr_length


def test_effective_diffusivity_values():
    spec = CovarianceSpec(2, 0.5, "isotropic-scalar", 0.25, 1.0)
    assert np.array_equal(effective_diffusivity(spec), np.diag([0.75, 0.75]))
    spec0 = CovarianceSpec(3, 0.7, "isotropic-scalar", 0.0, 1.0)
    assert np.array_equal(effective_diffusivity(spec0), 0.7 * np.eye(3))


@pytest.mark.parametrize("family,d", FAMILIES)
def test_a_matrix_at_origin(family, d):
    spec = CovarianceSpec(d, 1.0, family, 0.5, 1.0)
    A = a_matrix(spec, np.zeros(d))
    R0 = eval_R(spec, np.zeros(d))
    np.testing.assert_allclose(A[:d, d:], 0.0)
    np.testing.assert_allclose(A[d:, d:], np.eye(d), atol=1e-15)
    np.testing.assert_allclose(A[:d, :d], 0.25 * np.eye(d) + 0.5 * R0, atol=1e-15)


def test_a22_far_field(scalar1):
    far = a22_matrix(scalar1, np.array([[40.0]]))
    np.testing.assert_allclose(far[0], effective_diffusivity(scalar1), atol=1e-15)


@pytest.mark.parametrize("family,d", FAMILIES)
def test_generator_matrix_is_elliptic(family, d):
    spec = CovarianceSpec(d, 1.0, family, 0.5, 1.0)
    ax = np.linspace(-5, 5, 21)
    z = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    A = a_matrix(spec, z)
    sym = 0.5 * (A + np.swapaxes(A, -1, -2))
    assert np.linalg.eigvalsh(sym).min() >= spec.nu / 8


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-6, 6), min_size=2, max_size=2), st.sampled_from(FAMILIES[2:]))
def test_kernel_reflection_symmetry(z, fam):
    family, d = fam
    spec = CovarianceSpec(d, 1.0, family, 0.5, 1.0)
    z = np.array(z)
    np.testing.assert_allclose(eval_R(spec, z), eval_R(spec, -z).T, atol=1e-15, rtol=0)


def test_chi_closed_form_arithmetic():
    spec = CovarianceSpec(1, 1.0, "isotropic-scalar", 0.5, 1.0)
    z = np.sqrt(2 * np.log(2.0))  # f(z) = 0.25
    assert float(chi_closed_form(spec, z)) == pytest.approx(1.2, rel=1e-14)
    assert float(chi_closed_form(spec, 0.0)) == pytest.approx(1.5, rel=1e-15)
    assert float(chi_closed_form(spec, 50.0)) == pytest.approx(1.0, abs=1e-15)
    spec0 = CovarianceSpec(1, 1.0, "isotropic-scalar", 0.0, 1.0)
    assert np.all(chi_closed_form(spec0, np.linspace(0, 5, 7)) == 1.0)


def test_no_closed_form_for_projection_families(incomp2):
    with pytest.raises(ConfigurationError):
        chi_closed_form(incomp2, np.zeros(2))


@pytest.mark.parametrize("family,d", FAMILIES)
def test_spectral_density_sums_to_origin_value(family, d):
    spec = CovarianceSpec(d, 1.0, family, 0.5, 1.0)
    grid = Grid(d, 128, 32.0)
    full = np.stack(np.meshgrid(*([2 * np.pi * np.fft.fftfreq(grid.n, grid.dx)] * d), indexing="ij"), axis=-1)
    S = spectral_density(spec, full, cell=(2 * np.pi / grid.length) ** d)
    np.testing.assert_allclose(S.sum(axis=tuple(range(d))), eval_R(spec, np.zeros(d)), rtol=1e-6, atol=1e-12)
    w = np.linalg.eigvalsh(S.reshape(-1, d, d))
    assert w.min() >= -1e-15


def test_scalar_spectrum_diagonal_and_transverse_projection():
    spec = CovarianceSpec(2, 1.0, "isotropic-scalar", 0.5, 1.0)
    S = spectral_density(spec, np.array([[0.3, -1.2]]))[0]
    assert S[0, 1] == 0 and S[0, 0] > 0 and S[0, 0] == S[1, 1]
    inc = CovarianceSpec(2, 1.0, "incompressible", 0.5, 1.0)
    S = spectral_density(inc, np.array([[1.0, 0.0]]))[0]
    np.testing.assert_allclose(S @ np.array([1.0, 0.0]), 0.0, atol=1e-17)


def test_invalid_specs_rejected():
    with pytest.raises(ConfigurationError):
        CovarianceSpec(1, 1.0, "incompressible", 0.5, 1.0)
    with pytest.raises(ConfigurationError):
        CovarianceSpec(1, -1.0, "isotropic-scalar", 0.5, 1.0)
    with pytest.raises(ConfigurationError):
        CovarianceSpec(2, 1.0, "nonsense", 0.5, 1.0)
