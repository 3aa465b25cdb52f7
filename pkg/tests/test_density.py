import math
from collections import deque

import numpy as np
import pytest
from scipy import stats

from bpminer.density import (
    DensityGrid,
    GridAxis,
    density_grid,
    grid_peak,
    iso_contours,
    peak,
    study_ellipses,
)
from bpminer.extraction import BPExtraction
from bpminer.gmm import GaussianMixture


def _model(weights, means, covs, seed=0):
    return GaussianMixture(
        weights=np.asarray(weights, float),
        means=np.asarray(means, float),
        covariances=np.asarray(covs, float),
        seed=seed,
    )


def _isotropic(mean=(130.0, 75.0), sigma=8.0, weight=1.0):
    return (weight, mean, [[sigma**2, 0.0], [0.0, sigma**2]])


def _mk(*components):
    weights, means, covs = zip(*components)
    return _model(weights, means, covs)


# --- density grid ------------------------------------------------------------

def test_grid_mass_over_8_sigma_near_one():
    sigma = 8.0
    mean = (130.0, 75.0)
    model = _mk(_isotropic(mean, sigma))
    bounds = ((mean[0] - 8 * sigma, mean[0] + 8 * sigma),
              (mean[1] - 8 * sigma, mean[1] + 8 * sigma))
    grid = density_grid(model, bounds, 256)
    assert 1 - 1e-3 <= grid.total_mass() <= 1 + 1e-6


def test_grid_mass_for_mixture():
    model = _mk(
        (0.6, (120.0, 70.0), [[25.0, 5.0], [5.0, 16.0]]),
        (0.4, (150.0, 90.0), [[36.0, -4.0], [-4.0, 25.0]]),
    )
    bounds = ((135 - 80, 135 + 80), (80 - 80, 80 + 80))
    grid = density_grid(model, bounds, 256)
    assert 1 - 1e-3 <= grid.total_mass() <= 1 + 1e-6


def test_grid_values_match_scipy_pointwise():
    model = _mk(
        (0.7, (125.0, 78.0), [[30.0, 8.0], [8.0, 20.0]]),
        (0.3, (145.0, 92.0), [[20.0, 0.0], [0.0, 15.0]]),
    )
    grid = density_grid(model, ((60, 200), (30, 120)), 32)
    xs = grid.sbp_axis.centers()
    ys = grid.dbp_axis.centers()
    for i in (0, 13, 31):
        for j in (0, 17, 31):
            expected = sum(
                w * stats.multivariate_normal(m, c).pdf([xs[j], ys[i]])
                for w, m, c in zip(model.weights, model.means, model.covariances)
            )
            assert grid.values[i, j] == pytest.approx(expected, rel=1e-10)


def test_unimodal_argmax_at_center_cell():
    model = _mk(_isotropic((130.0, 75.0), 10.0))
    grid = density_grid(model, ((60, 200), (30, 120)), 141)  # odd: mean on a center
    i, j = np.unravel_index(np.argmax(grid.values), grid.values.shape)
    assert grid.sbp_axis.center(int(j)) == pytest.approx(130.0, abs=1e-9)
    assert grid.dbp_axis.center(int(i)) == pytest.approx(75.0, abs=1e-9)


def test_mirrored_components_give_mirrored_grid():
    model = _mk(
        (0.5, (110.0, 75.0), [[25.0, 0.0], [0.0, 16.0]]),
        (0.5, (150.0, 75.0), [[25.0, 0.0], [0.0, 16.0]]),
    )
    grid = density_grid(model, ((60, 200), (30, 120)), 128)  # symmetric about 130
    np.testing.assert_allclose(grid.values, grid.values[:, ::-1], rtol=1e-12)


def test_grid_axis_validation():
    with pytest.raises(ValueError):
        GridAxis(10.0, 10.0, 16)
    with pytest.raises(ValueError):
        GridAxis(0.0, 1.0, 1)


# --- peak ---------------------------------------------------------------------

def test_peak_of_single_gaussian_is_its_mean():
    model = _mk(_isotropic((125.0, 78.0), 9.0))
    sbp, dbp = peak(model, ((60, 200), (30, 120)), 256)
    assert abs(sbp - 125.0) < 140 / 256
    assert abs(dbp - 78.0) < 90 / 256


def test_peak_matches_dense_brute_force_oracle():
    model = _mk(
        (0.7, (130.0, 85.0), [[16.0, 0.0], [0.0, 16.0]]),
        (0.3, (110.0, 70.0), [[16.0, 0.0], [0.0, 16.0]]),
    )
    got = peak(model, ((60, 200), (30, 120)), 256)

    # independent dense evaluation via scipy
    xs = np.linspace(60, 200, 801)
    ys = np.linspace(30, 120, 801)
    xx, yy = np.meshgrid(xs, ys)
    dens = np.zeros_like(xx)
    for w, m, c in zip(model.weights, model.means, model.covariances):
        dens += w * stats.multivariate_normal(m, c).pdf(np.dstack([xx, yy]))
    i, j = np.unravel_index(np.argmax(dens), dens.shape)
    oracle = (xs[j], ys[i])
    assert abs(got[0] - oracle[0]) < 140 / 256
    assert abs(got[1] - oracle[1]) < 90 / 256


def test_peak_shifted_model_orders_correctly():
    female = _mk(_isotropic((124.0, 79.0), 6.0))
    male = _mk(_isotropic((129.0, 84.0), 6.0))
    peak_f = peak(female)
    peak_m = peak(male)
    assert peak_m[0] > peak_f[0]
    assert peak_m[1] > peak_f[1]


def test_grid_peak_tie_breaks_toward_lower_sbp_dbp():
    values = np.zeros((8, 8))
    values[6, 5] = values[2, 3] = values[6, 3] = 1.0  # three exact ties
    grid = DensityGrid(GridAxis(0.0, 8.0, 8), GridAxis(0.0, 8.0, 8), values)
    sbp, dbp = grid_peak(grid)
    # lowest sbp column is 3; among those, lowest dbp row is 2
    assert (sbp, dbp) == (grid.sbp_axis.center(3), grid.dbp_axis.center(2))


def test_grid_peak_refinement_improves_subcell_accuracy():
    model = _mk(_isotropic((127.3, 81.7), 9.0))
    sbp, dbp = peak(model, ((60, 200), (30, 120)), 128)
    # much tighter than the ~1.1 / 0.7 mmHg cell widths
    assert abs(sbp - 127.3) < 0.2
    assert abs(dbp - 81.7) < 0.2


# --- contours -------------------------------------------------------------------

def test_half_peak_contour_is_circle_of_analytic_radius():
    sigma = 8.0
    mean = (130.0, 75.0)
    model = _mk(_isotropic(mean, sigma))
    grid = density_grid(model, ((60, 200), (30, 120)), 141)  # mean on a cell center
    (level,) = iso_contours(grid, [0.5])
    assert len(level.polylines) == 1
    line = level.polylines[0]
    assert line.closed
    radius = sigma * math.sqrt(2 * math.log(2))
    cell = max(grid.sbp_axis.cell_width, grid.dbp_axis.cell_width)
    radial = np.hypot(line.vertices[:, 0] - mean[0], line.vertices[:, 1] - mean[1])
    assert np.max(np.abs(radial - radius)) < cell


def test_contour_at_0999_is_tiny_loop_around_peak():
    model = _mk(_isotropic((130.0, 75.0), 8.0))
    grid = density_grid(model, ((60, 200), (30, 120)), 141)
    (level,) = iso_contours(grid, [0.999])
    assert len(level.polylines) == 1
    line = level.polylines[0]
    assert line.closed
    assert np.all(np.hypot(line.vertices[:, 0] - 130.0,
                           line.vertices[:, 1] - 75.0) < 2.0)


def _count_components(mask):
    seen = np.zeros_like(mask, dtype=bool)
    count = 0
    for i, j in zip(*np.nonzero(mask)):
        if seen[i, j]:
            continue
        count += 1
        queue = deque([(i, j)])
        seen[i, j] = True
        while queue:
            a, b = queue.popleft()
            for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                na, nb = a + da, b + db
                if (0 <= na < mask.shape[0] and 0 <= nb < mask.shape[1]
                        and mask[na, nb] and not seen[na, nb]):
                    seen[na, nb] = True
                    queue.append((na, nb))
    return count


def test_bimodal_loop_count_matches_thresholding_oracle():
    model = _mk(
        (0.5, (110.0, 70.0), [[36.0, 0.0], [0.0, 36.0]]),
        (0.5, (150.0, 95.0), [[36.0, 0.0], [0.0, 36.0]]),
    )
    grid = density_grid(model, ((60, 200), (30, 120)), 160)
    for fraction in (0.2, 0.5, 0.8):
        (level,) = iso_contours(grid, [fraction])
        closed = [line for line in level.polylines if line.closed]
        assert len(level.polylines) == len(closed)  # level sets stay interior
        expected = _count_components(grid.values >= level.value)
        assert len(closed) == expected


def test_contour_near_boundary_yields_open_polyline():
    model = _mk(_isotropic((65.0, 35.0), 12.0))  # mass pushed past the corner
    grid = density_grid(model, ((60, 200), (30, 120)), 100)
    (level,) = iso_contours(grid, [0.5])
    assert any(not line.closed for line in level.polylines)


def test_contour_levels_validated():
    grid = density_grid(_mk(_isotropic()), ((60, 200), (30, 120)), 32)
    for bad in (0.0, 1.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            iso_contours(grid, [bad])


def test_contours_deterministic():
    model = _mk(_isotropic((120.0, 70.0), 10.0))
    grid = density_grid(model, ((60, 200), (30, 120)), 96)
    a = iso_contours(grid, [0.3, 0.7])
    b = iso_contours(grid, [0.3, 0.7])
    assert len(a) == len(b) == 2
    for la, lb in zip(a, b):
        assert len(la.polylines) == len(lb.polylines)
        for pa, pb in zip(la.polylines, lb.polylines):
            np.testing.assert_array_equal(pa.vertices, pb.vertices)


# --- ellipses ----------------------------------------------------------------------

def _record(pmid, sbp, sbp_sd, dbp, dbp_sd):
    return BPExtraction(
        pmid=pmid, n_male=60, n_female=50,
        sbp_mean_male=sbp, sbp_sd_male=sbp_sd,
        dbp_mean_male=dbp, dbp_sd_male=dbp_sd,
        sbp_mean_female=sbp - 5, sbp_sd_female=sbp_sd,
        dbp_mean_female=dbp - 5, dbp_sd_female=dbp_sd,
    )


def test_ellipse_projection():
    (ellipse,) = study_ellipses([_record("1", 130.0, 10.0, 85.0, 6.0)], "male")
    assert (ellipse.center_sbp, ellipse.center_dbp) == (130.0, 85.0)
    assert (ellipse.radius_sbp, ellipse.radius_dbp) == (10.0, 6.0)
    assert ellipse.pmid == "1"


def test_ellipses_empty():
    assert study_ellipses([], "female") == []


def test_ellipses_fixture_hand_read():
    records = [
        _record("a", 128.0, 9.0, 82.0, 5.0),
        _record("b", 131.0, 11.0, 86.0, 7.0),
        _record("c", 137.0, 8.0, 88.0, 6.0),
    ]
    ellipses = study_ellipses(records, "female")
    assert [(e.center_sbp, e.center_dbp) for e in ellipses] == [
        (123.0, 77.0), (126.0, 81.0), (132.0, 83.0),
    ]
    assert [e.pmid for e in ellipses] == ["a", "b", "c"]
