"""Hot-loop dispatch: compiled Cython kernels when built, numpy fallback otherwise.

Set ``KRAICHNAN_PURE_PYTHON=1`` to force the fallback (used by the
cross-backend tests and the benchmark).
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_ext = None
if os.environ.get("KRAICHNAN_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _ext

        BACKEND = "cython"
    except ImportError:  # extension not built
        _ext = None


def spline_eval(coeffs: np.ndarray, x: np.ndarray, dx: float, backend: str | None = None) -> np.ndarray:
    """Values of periodic cubic B-spline fields at points.

    ``coeffs`` has shape ``(m, *grid_shape)``, ``x`` shape ``(N, d)`` with
    coordinates in box units (any real value; wrapped periodically).
    Returns an ``(N, m)`` array.
    """
    backend = backend or BACKEND
    coeffs = np.ascontiguousarray(coeffs, dtype=float)
    x = np.ascontiguousarray(x, dtype=float)
    d = coeffs.ndim - 1
    out = np.empty((x.shape[0], coeffs.shape[0]))
    if backend == "cython" and _ext is not None and d in (1, 2):
        if d == 1:
            _ext.spline_eval_1d(coeffs, np.ascontiguousarray(x[:, 0]), float(dx), out)
        else:
            _ext.spline_eval_2d(coeffs, x, float(dx), out)
    else:
        _kernels_py.spline_eval(coeffs, x, float(dx), out)
    return out


def deposit_cic(x: np.ndarray, dx: float, shape: tuple, backend: str | None = None) -> np.ndarray:
    """Cloud-in-cell counts of points ``x`` (N, d) on a periodic grid of ``shape``."""
    backend = backend or BACKEND
    x = np.ascontiguousarray(x, dtype=float)
    grid = np.zeros(shape)
    if backend == "cython" and _ext is not None and len(shape) in (1, 2):
        if len(shape) == 1:
            _ext.deposit_cic_1d(np.ascontiguousarray(x[:, 0]), float(dx), grid)
        else:
            _ext.deposit_cic_2d(x, float(dx), grid)
    else:
        _kernels_py.deposit_cic(x, float(dx), grid)
    return grid
