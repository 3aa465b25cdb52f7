"""Numeric kernel dispatch: compiled core with pure-Python fallback.

The hot inner loops (Gaussian log densities, derived-mean subset search,
marching squares) live in the Cython extension ``bpminer._kernels``. When
the extension is unavailable, or BPMINER_PURE_PYTHON is set, the
pure-Python twin ``bpminer._kernels_py`` is used instead. Both expose the
same contract; ``benchmarks/bench_kernels.py`` compares their speed.
"""

from __future__ import annotations

import os

import numpy as np

from bpminer import _kernels_py

_impl = None
if not os.environ.get("BPMINER_PURE_PYTHON"):
    try:
        from bpminer import _kernels as _impl
    except ImportError:
        _impl = None
if _impl is None:
    _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

# The compiled subset enumerator uses a fixed-size index buffer.
MAX_SUBSET_SIZE = 16


def component_logpdf(points, means, covs) -> np.ndarray:
    """(n, k) matrix of log N(point_i | mean_j, cov_j) for 2-D Gaussians."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    means = np.ascontiguousarray(means, dtype=np.float64)
    covs = np.ascontiguousarray(covs, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("points must have shape (n, 2)")
    if means.ndim != 2 or means.shape[1] != 2:
        raise ValueError("means must have shape (k, 2)")
    if covs.shape != (means.shape[0], 2, 2):
        raise ValueError("covs must have shape (k, 2, 2)")
    return _impl.component_logpdf(points, means, covs)


def subset_mean_hit(values, target: float, tol: float, max_size: int):
    """Indices of the first subset (size 2..max_size) averaging to target.

    Returns a tuple of indices into ``values`` or None. Scan order is
    (size ascending, lexicographic), so smaller subsets win ties.
    """
    if max_size > MAX_SUBSET_SIZE:
        raise ValueError(f"max_size above {MAX_SUBSET_SIZE} is not supported")
    values = np.ascontiguousarray(values, dtype=np.float64)
    if max_size < 2 or values.shape[0] < 2:
        return None
    return _impl.subset_mean_hit(values, float(target), float(tol), int(max_size))


def march_cells(grid, level: float) -> list[tuple[float, float, float, float]]:
    """Marching-squares segments (x0, y0, x1, y1) in node-index coordinates."""
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] < 2 or grid.shape[1] < 2:
        raise ValueError("grid must be at least 2x2")
    return _impl.march_cells(grid, float(level))
