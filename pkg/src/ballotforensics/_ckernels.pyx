# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Semantics mirror ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, sqrt, isnan, M_PI

cnp.import_array()

# beyond this many bandwidths exp(-d*d/2) underflows to 0.0 in double precision
cdef double KDE_CUTOFF = 40.0


cdef inline Py_ssize_t _bin(double v, double lo, double step, Py_ssize_t bins) nogil:
    # edges are lo + k * step, as np.linspace builds them; the floor guess
    # can be one off when v sits on an edge
    cdef double b = floor((v - lo) / step)
    cdef Py_ssize_t c
    if b < 0:
        return 0
    if b >= bins:
        return bins - 1
    c = <Py_ssize_t>b
    if c < bins - 1 and v >= (c + 1) * step + lo:
        c += 1
    elif c > 0 and v < c * step + lo:
        c -= 1
    return c


def bin_index2d(const double[::1] x, const double[::1] y, double lo, double hi, Py_ssize_t bins):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double step = (hi - lo) / bins
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    with nogil:
        for i in range(n):
            if isnan(x[i]) or isnan(y[i]):
                o[i] = -1
            else:
                o[i] = _bin(y[i], lo, step, bins) * bins + _bin(x[i], lo, step, bins)
    return out


def hist2d(const double[::1] x, const double[::1] y, double lo, double hi, Py_ssize_t bins):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double step = (hi - lo) / bins
    out = np.zeros((bins, bins), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] g = out
    with nogil:
        for i in range(n):
            if isnan(x[i]) or isnan(y[i]):
                continue
            g[_bin(y[i], lo, step, bins), _bin(x[i], lo, step, bins)] += 1
    return out


def kde_grid(const double[::1] data, const double[::1] grid, double h):
    """Gaussian KDE of ascending ``data`` at ascending ``grid`` points."""
    cdef Py_ssize_t n = data.shape[0], m = grid.shape[0], j, k, start = 0
    cdef double g, d, acc, reach = KDE_CUTOFF * h
    cdef double norm = 1.0 / (n * h * sqrt(2.0 * M_PI))
    out = np.zeros(m, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for j in range(m):
            g = grid[j]
            while start < n and data[start] < g - reach:
                start += 1
            acc = 0.0
            k = start
            while k < n and data[k] <= g + reach:
                d = (g - data[k]) / h
                acc += exp(-0.5 * d * d)
                k += 1
            o[j] = acc * norm
    return out


def group_means(const cnp.int64_t[::1] codes, const double[::1] values, Py_ssize_t ngroups):
    cdef Py_ssize_t n = codes.shape[0], i, c
    sums = np.zeros(ngroups, dtype=np.float64)
    counts = np.zeros(ngroups, dtype=np.int64)
    cdef double[::1] s = sums
    cdef cnp.int64_t[::1] k = counts
    with nogil:
        for i in range(n):
            c = codes[i]
            s[c] += values[i]
            k[c] += 1
    means = np.full(ngroups, np.nan)
    nz = counts > 0
    means[nz] = sums[nz] / counts[nz]
    return means, counts
