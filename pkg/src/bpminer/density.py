"""Density grids, peaks, iso-contours, and per-study ellipses.

The mixture density is evaluated exactly (no sampling) at cell centers
over (SBP, DBP) bounds; contours are extracted with marching squares at
fractions of the peak density. Everything here emits plot-ready data, not
images.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from bpminer import kernels
from bpminer.extraction import BPExtraction
from bpminer.gmm import GaussianMixture, _logsumexp_rows

logger = logging.getLogger(__name__)

# Default evaluation window: the validation ranges.
DEFAULT_SBP_BOUNDS = (60.0, 200.0)
DEFAULT_DBP_BOUNDS = (30.0, 120.0)
DEFAULT_RESOLUTION = 256


@dataclass(frozen=True)
class GridAxis:
    """n uniform cells covering [lo, hi]; values are taken at cell centers."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not (self.hi > self.lo):
            raise ValueError("axis bounds must satisfy lo < hi")
        if self.n < 2:
            raise ValueError("axis resolution must be >= 2")

    @property
    def cell_width(self) -> float:
        return (self.hi - self.lo) / self.n

    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.n) + 0.5) * self.cell_width

    def center(self, index: float) -> float:
        """Data coordinate of a (possibly fractional) cell-center index."""
        return self.lo + (index + 0.5) * self.cell_width


@dataclass
class DensityGrid:
    """Mixture density sampled at cell centers; values[i, j] is the density
    at (sbp = sbp_axis.center(j), dbp = dbp_axis.center(i))."""

    sbp_axis: GridAxis
    dbp_axis: GridAxis
    values: np.ndarray

    @property
    def cell_area(self) -> float:
        return self.sbp_axis.cell_width * self.dbp_axis.cell_width

    def total_mass(self) -> float:
        """Midpoint-rule mass inside the bounds; near 1 for wide bounds."""
        return float(self.values.sum() * self.cell_area)

    def peak_value(self) -> float:
        return float(self.values.max())


def density_grid(
    model: GaussianMixture,
    bounds: tuple = (DEFAULT_SBP_BOUNDS, DEFAULT_DBP_BOUNDS),
    n: int = DEFAULT_RESOLUTION,
) -> DensityGrid:
    """Evaluate the mixture density on an n-by-n grid of cell centers."""
    (sbp_lo, sbp_hi), (dbp_lo, dbp_hi) = bounds
    sbp_axis = GridAxis(float(sbp_lo), float(sbp_hi), int(n))
    dbp_axis = GridAxis(float(dbp_lo), float(dbp_hi), int(n))
    sbp_c, dbp_c = np.meshgrid(sbp_axis.centers(), dbp_axis.centers())
    pts = np.column_stack([sbp_c.ravel(), dbp_c.ravel()])
    log_comp = kernels.component_logpdf(pts, model.means, model.covariances)
    dens = np.exp(_logsumexp_rows(log_comp + np.log(model.weights)))
    return DensityGrid(sbp_axis, dbp_axis, dens.reshape(dbp_axis.n, sbp_axis.n))


def _parabolic_offset(f_minus: float, f_center: float, f_plus: float) -> float:
    """Sub-cell offset of the parabola vertex through three samples."""
    denom = 2.0 * f_center - f_minus - f_plus
    if denom <= 0:
        return 0.0
    offset = 0.5 * (f_plus - f_minus) / denom
    return float(np.clip(offset, -0.5, 0.5))


def peak(
    model: GaussianMixture,
    bounds: tuple = (DEFAULT_SBP_BOUNDS, DEFAULT_DBP_BOUNDS),
    n: int = DEFAULT_RESOLUTION,
) -> tuple[float, float]:
    """(SBP, DBP) of the density maximum over the grid.

    The argmax cell is refined by one quadratic interpolation step per
    axis; exact grid-value ties break toward lower (sbp, dbp).
    """
    return grid_peak(density_grid(model, bounds, n))


def grid_peak(grid: DensityGrid) -> tuple[float, float]:
    """Argmax cell center of a density grid, quadratically refined."""
    values = grid.values
    top = values.max()
    tie_rows, tie_cols = np.nonzero(values == top)
    order = np.lexsort((grid.dbp_axis.center(tie_rows.astype(float)),
                        grid.sbp_axis.center(tie_cols.astype(float))))
    i = int(tie_rows[order[0]])
    j = int(tie_cols[order[0]])

    col_offset = 0.0
    if 0 < j < grid.sbp_axis.n - 1:
        col_offset = _parabolic_offset(values[i, j - 1], values[i, j], values[i, j + 1])
    row_offset = 0.0
    if 0 < i < grid.dbp_axis.n - 1:
        row_offset = _parabolic_offset(values[i - 1, j], values[i, j], values[i + 1, j])
    return (grid.sbp_axis.center(j + col_offset), grid.dbp_axis.center(i + row_offset))


@dataclass
class ContourLine:
    """One polyline of an iso-contour, in data coordinates."""

    vertices: np.ndarray  # (m, 2) columns (sbp, dbp)
    closed: bool


@dataclass
class ContourLevel:
    fraction: float  # of the grid's peak density
    value: float     # absolute density level
    polylines: list


def _quantize(x: float, y: float) -> tuple:
    return (round(x * 1048576.0), round(y * 1048576.0))


def _assemble_polylines(segments):
    """Join marching-squares segments into chains; deterministic order."""
    coords = {}
    edges = []
    adjacency = {}
    for x0, y0, x1, y1 in segments:
        k0 = _quantize(x0, y0)
        k1 = _quantize(x1, y1)
        if k0 == k1:
            continue  # degenerate segment (level exactly at a node)
        coords.setdefault(k0, (x0, y0))
        coords.setdefault(k1, (x1, y1))
        eid = len(edges)
        edges.append((k0, k1))
        adjacency.setdefault(k0, []).append(eid)
        adjacency.setdefault(k1, []).append(eid)

    used = [False] * len(edges)

    def walk(start):
        path = [start]
        current = start
        while True:
            next_eid = None
            for eid in adjacency[current]:
                if not used[eid]:
                    next_eid = eid
                    break
            if next_eid is None:
                break
            used[next_eid] = True
            a, b = edges[next_eid]
            current = b if a == current else a
            path.append(current)
            if current == start:
                break
        return path

    chains = []
    # Open chains first, started from odd-degree endpoints (grid boundary).
    for key in sorted(k for k, eids in adjacency.items() if len(eids) % 2 == 1):
        while any(not used[e] for e in adjacency[key]):
            path = walk(key)
            if len(path) >= 2:
                chains.append(path)
    # Whatever remains forms closed loops.
    for key in sorted(adjacency.keys()):
        while any(not used[e] for e in adjacency[key]):
            path = walk(key)
            if len(path) >= 2:
                chains.append(path)

    polylines = []
    for path in chains:
        closed = len(path) > 2 and path[0] == path[-1]
        if closed:
            path = path[:-1]
        polylines.append(([coords[k] for k in path], closed))
    return polylines


def iso_contours(grid: DensityGrid, levels: Sequence[float]) -> list:
    """Extract iso-contours at the given fractions of the peak density.

    Each fraction must lie strictly in (0, 1). Returns one ContourLevel
    per fraction, with polylines in data coordinates, closed where the
    level set closes inside the bounds.
    """
    for fraction in levels:
        if not (0.0 < fraction < 1.0):
            raise ValueError(f"contour levels must be in (0, 1), got {fraction}")
    peak_density = grid.peak_value()
    out = []
    for fraction in levels:
        level = fraction * peak_density
        segments = kernels.march_cells(grid.values, level)
        polylines = []
        for points, closed in _assemble_polylines(segments):
            verts = np.array(
                [(grid.sbp_axis.center(x), grid.dbp_axis.center(y)) for x, y in points]
            )
            polylines.append(ContourLine(vertices=verts, closed=closed))
        out.append(ContourLevel(fraction=float(fraction), value=float(level),
                                polylines=polylines))
    return out


@dataclass(frozen=True)
class StudyEllipse:
    """Per-study glyph: center at the BP means, radii equal to the SDs."""

    center_sbp: float
    center_dbp: float
    radius_sbp: float
    radius_dbp: float
    pmid: str = ""


def study_ellipses(records: Iterable[BPExtraction], sex: str) -> list[StudyEllipse]:
    """One ellipse per validated record for the given sex."""
    if sex not in ("male", "female"):
        raise ValueError(f"sex must be 'male' or 'female', got {sex!r}")
    ellipses = []
    for record in records:
        ellipses.append(StudyEllipse(
            center_sbp=float(getattr(record, f"sbp_mean_{sex}")),
            center_dbp=float(getattr(record, f"dbp_mean_{sex}")),
            radius_sbp=float(getattr(record, f"sbp_sd_{sex}")),
            radius_dbp=float(getattr(record, f"dbp_sd_{sex}")),
            pmid=record.pmid,
        ))
    return ellipses
