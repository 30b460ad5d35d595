from __future__ import annotations

import numpy as np
import pytest

from kraichnan_lab.covariance import CovarianceSpec, InsufficientReplicas
from kraichnan_lab.corrector import (
    cauchy_gaps,
    jackknife_mean,
    lag_correlation,
    run_batch,
    run_from_constant,
    spatial_product,
    time_correlation,
    two_point_correlation,
)
from kraichnan_lab.fieldsynth import Environment, Grid
from kraichnan_lab.moment2 import chi_on_grid, solve_sm

DT = 1 / 128


@pytest.fixture(scope="module")
def scalar_runs():
    spec = CovarianceSpec(1, 1.0, "isotropic-scalar", 0.5, 1.0)
    grid = Grid(1, 128, 32.0)
    env = Environment(spec, grid, DT, master_seed=21)
    runs = run_batch(spec, grid, 20.0, 0.0, range(200), env, extra_times=(1.0, 8.0))
    return spec, grid, runs


def test_jackknife_of_mean_is_classical_error():
    x = np.random.default_rng(0).standard_normal(37)
    e = jackknife_mean(x)
    assert e.value == pytest.approx(x.mean())
    assert e.stderr == pytest.approx(x.std(ddof=1) / np.sqrt(37), rel=1e-12)


def test_incompressible_and_noiseless_give_one(grid2):
    inc = CovarianceSpec(2, 1.0, "incompressible", 0.5, 1.0)
    est = run_from_constant(inc, grid2, 12.0, 0.0, 0, Environment(inc, grid2, 0.005))
    assert np.abs(est.field.values - 1).max() <= 1e-12
    zero = CovarianceSpec(1, 1.0, "isotropic-scalar", 0.0, 1.0)
    g = Grid(1, 128, 32.0)
    est = run_from_constant(zero, g, 12.0, 0.0, 0, Environment(zero, g, DT))
    assert np.all(est.field.values == 1.0)


def test_replica_mean_is_one(scalar_runs):
    _, grid, runs = scalar_runs
    u = np.array([e.field.values for e in runs[0]])
    mean, se = u.mean(axis=0), u.std(axis=0, ddof=1) / np.sqrt(len(u))
    assert np.all(np.abs(mean - 1) < 3.5 * se)
    np.testing.assert_allclose(u.mean(axis=1), 1.0, atol=1e-12)  # spatial mean is conserved


def test_two_point_function(scalar_runs):
    spec, grid, runs = scalar_runs
    chi = chi_on_grid(spec, grid, "box-mean")
    # the finite burn-in gap, from the deterministic second-moment equation
    S, _ = solve_sm(spec, grid, 20.0)
    for z in (0.0, 8.0):
        est = two_point_correlation(runs[0], z)
        idx = int(round(z / grid.dx))
        gap = abs(S.values[idx] / S.values.mean() - chi[idx])
        assert abs(est.value - chi[idx]) < 3 * est.stderr + gap
    assert two_point_correlation(runs[0], 8.0).value == pytest.approx(1.0, abs=0.05)
    assert two_point_correlation(runs[0], 0.0).value == pytest.approx(1.5, abs=0.1)


def test_lags_decorrelate(scalar_runs):
    _, _, runs = scalar_runs
    c0 = lag_correlation(runs[0], runs[0])
    c1 = lag_correlation(runs[0], runs[1])
    c8 = lag_correlation(runs[0], runs[2])
    assert c0.value > c1.value > c8.value
    assert c1.value - c8.value > np.hypot(c1.stderr, c8.stderr)


def test_incompressible_lags_vanish(grid2):
    inc = CovarianceSpec(2, 1.0, "incompressible", 0.5, 1.0)
    out = time_correlation(inc, grid2, (0.0, 0.5), range(4), 10.0, env=Environment(inc, grid2, 0.005), min_replicas=4)
    assert all(abs(e.value) < 1e-20 and e.stderr < 1e-20 for e in out)


def test_minimum_replicas_enforced(scalar_runs):
    _, _, runs = scalar_runs
    with pytest.raises(InsufficientReplicas):
        two_point_correlation(runs[0][:10], 0.0)


def test_short_burn_in_warns(scalar1, grid1):
    with pytest.warns(UserWarning):
        run_batch(scalar1, grid1, 2.0, 0.0, [0], Environment(scalar1, grid1, DT))


def test_spatial_product_shift(grid1):
    u = np.cos(2 * np.pi * grid1.coords()[:, 0] / grid1.length)
    assert spatial_product(u, grid1, 0.0) == pytest.approx(0.5)
    assert spatial_product(u, grid1, grid1.length / 2) == pytest.approx(-0.5)


@pytest.mark.filterwarnings("ignore:burn-in")
def test_cauchy_gaps_shrink(scalar1, grid1):
    env = Environment(scalar1, grid1, DT, master_seed=5)
    gaps = cauchy_gaps(scalar1, grid1, (2.0, 8.0), range(10), env=env)
    assert gaps[1].value < gaps[0].value
