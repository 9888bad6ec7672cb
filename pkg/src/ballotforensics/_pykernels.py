"""Numpy implementations of the compiled kernels in ``_ckernels.pyx``."""
import math

import numpy as np

KDE_CUTOFF = 40.0


def _bins(v, lo, step, bins):
    c = np.clip(np.floor((v - lo) / step), 0, bins - 1).astype(np.int64)
    # edges are lo + k * step, as np.linspace builds them
    up = (c < bins - 1) & (v >= (c + 1) * step + lo)
    down = ~up & (c > 0) & (v < c * step + lo)
    return c + up - down


def bin_index2d(x, y, lo, hi, bins):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    step = (hi - lo) / bins
    bad = np.isnan(x) | np.isnan(y)
    xs = np.where(bad, lo, x)
    ys = np.where(bad, lo, y)
    out = _bins(ys, lo, step, bins) * bins + _bins(xs, lo, step, bins)
    out[bad] = -1
    return out


def hist2d(x, y, lo, hi, bins):
    idx = bin_index2d(x, y, lo, hi, bins)
    counts = np.bincount(idx[idx >= 0], minlength=bins * bins)
    return counts.astype(np.int64).reshape(bins, bins)


def kde_grid(data, grid, h, chunk=32):
    """Gaussian KDE of ascending ``data`` at ``grid`` points."""
    data = np.asarray(data, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    n = data.size
    norm = 1.0 / (n * h * math.sqrt(2.0 * math.pi))
    reach = KDE_CUTOFF * h
    out = np.empty(grid.size)
    for start in range(0, grid.size, chunk):
        g = grid[start:start + chunk]
        lo = np.searchsorted(data, g[0] - reach, side="left")
        hi = np.searchsorted(data, g[-1] + reach, side="right")
        d = (g[:, None] - data[None, lo:hi]) / h
        out[start:start + chunk] = np.exp(-0.5 * d * d).sum(axis=1) * norm
    return out


def group_means(codes, values, ngroups):
    codes = np.asarray(codes, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    sums = np.bincount(codes, weights=values, minlength=ngroups)
    counts = np.bincount(codes, minlength=ngroups).astype(np.int64)
    means = np.full(ngroups, np.nan)
    nz = counts > 0
    means[nz] = sums[nz] / counts[nz]
    return means, counts
