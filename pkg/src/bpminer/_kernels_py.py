"""Pure-Python implementations of the numeric kernels.

``bpminer.kernels`` prefers the compiled twin (``bpminer._kernels``); this
module is the fallback and the behavioural reference. Both implementations
must agree (differential tests in tests/test_kernels.py), so any change
here needs the same change in _kernels.pyx.
"""

import itertools
import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def component_logpdf(points, means, covs):
    """Log density of each 2-D Gaussian component at each point.

    points (n, 2), means (k, 2), covs (k, 2, 2) symmetric positive
    definite. Returns an (n, k) float64 array.
    """
    n = points.shape[0]
    k = means.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    for j in range(k):
        a = covs[j, 0, 0]
        b = covs[j, 0, 1]
        c = covs[j, 1, 1]
        det = a * c - b * b
        if det <= 0.0 or a <= 0.0:
            raise ValueError(f"covariance {j} is not positive definite")
        const = -LOG_2PI - 0.5 * math.log(det)
        dx = points[:, 0] - means[j, 0]
        dy = points[:, 1] - means[j, 1]
        quad = (dx * (c * dx - b * dy) + dy * (a * dy - b * dx)) / det
        out[:, j] = const - 0.5 * quad
    return out


def subset_mean_hit(values, target, tol, max_size):
    """First index subset of size 2..max_size whose mean is within tol of target.

    Subsets are scanned in (size, lexicographic index) order so the result
    is deterministic; returns a tuple of indices or None.
    """
    n = len(values)
    for size in range(2, max_size + 1):
        if size > n:
            break
        for combo in itertools.combinations(range(n), size):
            s = 0.0
            for i in combo:
                s += values[i]
            if abs(s / size - target) <= tol:
                return combo
    return None


def march_cells(grid, level):
    """Marching-squares segments of the iso-line ``grid == level``.

    Grid values sit at integer node coordinates (x=column, y=row). Returns
    a list of (x0, y0, x1, y1) segments with linearly interpolated
    crossings, scanned row-major so the order is deterministic. Saddle
    cells are disambiguated by the cell-center average.
    """
    rows = grid.shape[0]
    cols = grid.shape[1]
    segments = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            v0 = grid[r, c]
            v1 = grid[r, c + 1]
            v2 = grid[r + 1, c + 1]
            v3 = grid[r + 1, c]
            case = (
                (8 if v0 >= level else 0)
                | (4 if v1 >= level else 0)
                | (2 if v2 >= level else 0)
                | (1 if v3 >= level else 0)
            )
            if case == 0 or case == 15:
                continue
            # Edge crossings, interpolated between the two adjacent nodes.
            if case in (4, 5, 6, 7, 8, 9, 10, 11):  # top edge crossed
                top = (c + (level - v0) / (v1 - v0), float(r))
            if case in (2, 3, 4, 5, 10, 11, 12, 13):  # right edge crossed
                right = (float(c + 1), r + (level - v1) / (v2 - v1))
            if case in (1, 2, 5, 6, 9, 10, 13, 14):  # bottom edge crossed
                bottom = (c + (level - v3) / (v2 - v3), float(r + 1))
            if case in (1, 3, 5, 7, 8, 10, 12, 14):  # left edge crossed
                left = (float(c), r + (level - v0) / (v3 - v0))
            if case == 1 or case == 14:
                segments.append((left[0], left[1], bottom[0], bottom[1]))
            elif case == 2 or case == 13:
                segments.append((bottom[0], bottom[1], right[0], right[1]))
            elif case == 3 or case == 12:
                segments.append((left[0], left[1], right[0], right[1]))
            elif case == 4 or case == 11:
                segments.append((top[0], top[1], right[0], right[1]))
            elif case == 7 or case == 8:
                segments.append((left[0], left[1], top[0], top[1]))
            elif case == 6 or case == 9:
                segments.append((top[0], top[1], bottom[0], bottom[1]))
            elif case == 5:
                center = (v0 + v1 + v2 + v3) * 0.25
                if center >= level:
                    segments.append((left[0], left[1], top[0], top[1]))
                    segments.append((bottom[0], bottom[1], right[0], right[1]))
                else:
                    segments.append((left[0], left[1], bottom[0], bottom[1]))
                    segments.append((top[0], top[1], right[0], right[1]))
            elif case == 10:
                center = (v0 + v1 + v2 + v3) * 0.25
                if center >= level:
                    segments.append((top[0], top[1], right[0], right[1]))
                    segments.append((left[0], left[1], bottom[0], bottom[1]))
                else:
                    segments.append((left[0], left[1], top[0], top[1]))
                    segments.append((bottom[0], bottom[1], right[0], right[1]))
    return segments
