"""Pure numpy versions of the compiled kernels (same signatures, any dimension)."""
from __future__ import annotations

import itertools

import numpy as np


def _weights(t):
    s = 1.0 - t
    t2 = t * t
    t3 = t2 * t
    return np.stack(
        [s * s * s / 6.0, (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0, (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0, t3 / 6.0]
    )


def spline_eval(coeffs: np.ndarray, x: np.ndarray, dx: float, out: np.ndarray) -> None:
    """Evaluate periodic cubic B-spline fields ``coeffs`` (m, *shape) at points ``x`` (N, d)."""
    m = coeffs.shape[0]
    shape = coeffs.shape[1:]
    d = len(shape)
    u = x / dx
    base = np.floor(u).astype(np.int64)
    w = [_weights(u[:, a] - base[:, a]) for a in range(d)]
    flat = coeffs.reshape(m, -1)
    strides = np.cumprod((1,) + shape[::-1])[:-1][::-1]
    out[:] = 0.0
    for offs in itertools.product(range(4), repeat=d):
        weight = np.ones(x.shape[0])
        lin = np.zeros(x.shape[0], dtype=np.int64)
        for a, o in enumerate(offs):
            weight = weight * w[a][o]
            lin += ((base[:, a] - 1 + o) % shape[a]) * strides[a]
        out += weight[:, None] * flat[:, lin].T


def spline_eval_1d(coeffs, x, dx, out):
    spline_eval(np.asarray(coeffs), np.asarray(x)[:, None], dx, out)


def spline_eval_2d(coeffs, x, dx, out):
    spline_eval(np.asarray(coeffs), np.asarray(x), dx, out)


def deposit_cic(x: np.ndarray, dx: float, grid: np.ndarray) -> None:
    """Add cloud-in-cell weights of points ``x`` (N, d) onto the periodic ``grid``."""
    shape = grid.shape
    d = len(shape)
    u = x / dx
    base = np.floor(u).astype(np.int64)
    t = u - base
    flat = grid.reshape(-1)
    strides = np.cumprod((1,) + shape[::-1])[:-1][::-1]
    for offs in itertools.product(range(2), repeat=d):
        weight = np.ones(x.shape[0])
        lin = np.zeros(x.shape[0], dtype=np.int64)
        for a, o in enumerate(offs):
            weight = weight * (t[:, a] if o else 1.0 - t[:, a])
            lin += ((base[:, a] + o) % shape[a]) * strides[a]
        flat += np.bincount(lin, weights=weight, minlength=flat.size)


def deposit_cic_1d(x, dx, grid):
    deposit_cic(np.asarray(x)[:, None], dx, grid)


def deposit_cic_2d(x, dx, grid):
    deposit_cic(np.asarray(x), dx, grid)
