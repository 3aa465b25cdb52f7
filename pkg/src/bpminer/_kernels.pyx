# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of bpminer._kernels_py.

Keep both implementations in lockstep: the scan orders and arithmetic
expressions are mirrored so results match (tests/test_kernels.py runs the
differential suite).
"""

import numpy as np

from libc.math cimport fabs, log

cdef double LOG_2PI = log(2.0 * 3.14159265358979323846)

MAX_SUBSET = 16


def component_logpdf(double[:, ::1] points, double[:, ::1] means,
                     double[:, :, ::1] covs):
    """Log density of each 2-D Gaussian component at each point."""
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t k = means.shape[0]
    out_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double a, b, c, det, const, mx, my, dx, dy, quad
    for j in range(k):
        a = covs[j, 0, 0]
        b = covs[j, 0, 1]
        c = covs[j, 1, 1]
        det = a * c - b * b
        if det <= 0.0 or a <= 0.0:
            raise ValueError(f"covariance {j} is not positive definite")
        const = -LOG_2PI - 0.5 * log(det)
        mx = means[j, 0]
        my = means[j, 1]
        for i in range(n):
            dx = points[i, 0] - mx
            dy = points[i, 1] - my
            quad = (dx * (c * dx - b * dy) + dy * (a * dy - b * dx)) / det
            out[i, j] = const - 0.5 * quad
    return out_arr


def subset_mean_hit(double[::1] values, double target, double tol, int max_size):
    """First index subset of size 2..max_size whose mean is within tol of target."""
    cdef Py_ssize_t n = values.shape[0]
    cdef int size, j, t
    cdef double s
    cdef int idx[16]
    if max_size > 16:
        raise ValueError("max_size above 16 is not supported")
    for size in range(2, max_size + 1):
        if size > n:
            break
        for j in range(size):
            idx[j] = j
        while True:
            s = 0.0
            for j in range(size):
                s += values[idx[j]]
            if fabs(s / size - target) <= tol:
                return tuple(idx[j] for j in range(size))
            j = size - 1
            while j >= 0 and idx[j] == n - size + j:
                j -= 1
            if j < 0:
                break
            idx[j] += 1
            for t in range(j + 1, size):
                idx[t] = idx[t - 1] + 1
    return None


def march_cells(double[:, ::1] grid, double level):
    """Marching-squares segments of the iso-line ``grid == level``."""
    cdef Py_ssize_t rows = grid.shape[0]
    cdef Py_ssize_t cols = grid.shape[1]
    cdef Py_ssize_t r, c
    cdef int case
    cdef double v0, v1, v2, v3, center
    cdef double tx, ty, rx, ry, bx, by, lx, ly
    segments = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            v0 = grid[r, c]
            v1 = grid[r, c + 1]
            v2 = grid[r + 1, c + 1]
            v3 = grid[r + 1, c]
            case = 0
            if v0 >= level:
                case |= 8
            if v1 >= level:
                case |= 4
            if v2 >= level:
                case |= 2
            if v3 >= level:
                case |= 1
            if case == 0 or case == 15:
                continue
            if 4 <= case <= 11:  # top edge crossed
                tx = c + (level - v0) / (v1 - v0)
                ty = r
            if case in (2, 3, 4, 5, 10, 11, 12, 13):  # right edge crossed
                rx = c + 1
                ry = r + (level - v1) / (v2 - v1)
            if case in (1, 2, 5, 6, 9, 10, 13, 14):  # bottom edge crossed
                bx = c + (level - v3) / (v2 - v3)
                by = r + 1
            if case in (1, 3, 5, 7, 8, 10, 12, 14):  # left edge crossed
                lx = c
                ly = r + (level - v0) / (v3 - v0)
            if case == 1 or case == 14:
                segments.append((lx, ly, bx, by))
            elif case == 2 or case == 13:
                segments.append((bx, by, rx, ry))
            elif case == 3 or case == 12:
                segments.append((lx, ly, rx, ry))
            elif case == 4 or case == 11:
                segments.append((tx, ty, rx, ry))
            elif case == 7 or case == 8:
                segments.append((lx, ly, tx, ty))
            elif case == 6 or case == 9:
                segments.append((tx, ty, bx, by))
            elif case == 5:
                center = (v0 + v1 + v2 + v3) * 0.25
                if center >= level:
                    segments.append((lx, ly, tx, ty))
                    segments.append((bx, by, rx, ry))
                else:
                    segments.append((lx, ly, bx, by))
                    segments.append((tx, ty, rx, ry))
            elif case == 10:
                center = (v0 + v1 + v2 + v3) * 0.25
                if center >= level:
                    segments.append((tx, ty, rx, ry))
                    segments.append((lx, ly, bx, by))
                else:
                    segments.append((lx, ly, tx, ty))
                    segments.append((bx, by, rx, ry))
    return segments
