"""Kernel dispatch: compiled Cython loops when built, numpy otherwise.

Set ``BALLOTFORENSICS_PURE_PYTHON=1`` before import to force the numpy path.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("BALLOTFORENSICS_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def bin_index2d(x, y, lo, hi, bins):
    """Flat ``row * bins + col`` cell index (row = y bin); -1 for NaN points.

    Values outside ``[lo, hi]`` are clipped into the edge bins, so ``hi``
    itself lands in the last bin.
    """
    return _impl.bin_index2d(_f64(x), _f64(y), float(lo), float(hi), int(bins))


def hist2d(x, y, lo, hi, bins):
    """``bins x bins`` int64 counts, rows indexed by ``y``."""
    return _impl.hist2d(_f64(x), _f64(y), float(lo), float(hi), int(bins))


def kde_grid(data, grid, h):
    """Gaussian kernel density of sorted ``data`` evaluated at sorted ``grid``."""
    return _impl.kde_grid(_f64(data), _f64(grid), float(h))


def group_means(codes, values, ngroups):
    """Per-group means (NaN for empty groups) and counts."""
    return _impl.group_means(np.ascontiguousarray(codes, dtype=np.int64), _f64(values), int(ngroups))


__all__ = ["BACKEND", "bin_index2d", "hist2d", "kde_grid", "group_means"]
