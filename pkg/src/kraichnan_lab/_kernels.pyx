# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: periodic cubic B-spline evaluation and cloud-in-cell deposit."""
from libc.math cimport floor


cdef inline void _weights(double t, double* w) noexcept nogil:
    cdef double s = 1.0 - t
    cdef double t2 = t * t
    cdef double t3 = t2 * t
    w[0] = s * s * s / 6.0
    w[1] = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0
    w[2] = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0
    w[3] = t3 / 6.0


def spline_eval_1d(const double[:, ::1] coeffs, const double[::1] x, double dx, double[:, ::1] out):
    cdef Py_ssize_t m = coeffs.shape[0], n = coeffs.shape[1], N = x.shape[0]
    cdef Py_ssize_t p, c, a, idx
    cdef double u, t, acc
    cdef long i0
    cdef double w[4]
    with nogil:
        for p in range(N):
            u = x[p] / dx
            i0 = <long>floor(u)
            t = u - i0
            _weights(t, w)
            i0 = (i0 - 1) % n
            if i0 < 0:
                i0 += n
            for c in range(m):
                acc = 0.0
                for a in range(4):
                    idx = (i0 + a) % n
                    acc += w[a] * coeffs[c, idx]
                out[p, c] = acc


def spline_eval_2d(const double[:, :, ::1] coeffs, const double[:, ::1] x, double dx, double[:, ::1] out):
    cdef Py_ssize_t m = coeffs.shape[0], n0 = coeffs.shape[1], n1 = coeffs.shape[2], N = x.shape[0]
    cdef Py_ssize_t p, c, a, b, ia, ib
    cdef double u, v, acc, row
    cdef long i0, j0
    cdef double wx[4]
    cdef double wy[4]
    with nogil:
        for p in range(N):
            u = x[p, 0] / dx
            v = x[p, 1] / dx
            i0 = <long>floor(u)
            j0 = <long>floor(v)
            _weights(u - i0, wx)
            _weights(v - j0, wy)
            i0 = (i0 - 1) % n0
            if i0 < 0:
                i0 += n0
            j0 = (j0 - 1) % n1
            if j0 < 0:
                j0 += n1
            for c in range(m):
                acc = 0.0
                for a in range(4):
                    ia = (i0 + a) % n0
                    row = 0.0
                    for b in range(4):
                        ib = (j0 + b) % n1
                        row += wy[b] * coeffs[c, ia, ib]
                    acc += wx[a] * row
                out[p, c] = acc


def deposit_cic_1d(const double[::1] x, double dx, double[::1] grid):
    cdef Py_ssize_t n = grid.shape[0], N = x.shape[0], p
    cdef double u, t
    cdef long i0, i1
    with nogil:
        for p in range(N):
            u = x[p] / dx
            i0 = <long>floor(u)
            t = u - i0
            i0 = i0 % n
            if i0 < 0:
                i0 += n
            i1 = (i0 + 1) % n
            grid[i0] += 1.0 - t
            grid[i1] += t


def deposit_cic_2d(const double[:, ::1] x, double dx, double[:, ::1] grid):
    cdef Py_ssize_t n0 = grid.shape[0], n1 = grid.shape[1], N = x.shape[0], p
    cdef double u, v, tu, tv
    cdef long i0, i1, j0, j1
    with nogil:
        for p in range(N):
            u = x[p, 0] / dx
            v = x[p, 1] / dx
            i0 = <long>floor(u)
            j0 = <long>floor(v)
            tu = u - i0
            tv = v - j0
            i0 = i0 % n0
            if i0 < 0:
                i0 += n0
            j0 = j0 % n1
            if j0 < 0:
                j0 += n1
            i1 = (i0 + 1) % n0
            j1 = (j0 + 1) % n1
            grid[i0, j0] += (1.0 - tu) * (1.0 - tv)
            grid[i1, j0] += tu * (1.0 - tv)
            grid[i0, j1] += (1.0 - tu) * tv
            grid[i1, j1] += tu * tv
