"""Weighted 2-D Gaussian mixture fitting over (SBP, DBP) study means.

Expectation-maximization with cohort-size point weights, weighted
k-means++ seeding, and a covariance regularization floor. Fits are
deterministic given (points, k, seed): points are pre-sorted canonically
so the result does not depend on input file order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from bpminer import kernels
from bpminer.errors import FitError, NumericError
from bpminer.extraction import BPExtraction

logger = logging.getLogger(__name__)

DEFAULT_REG = 1e-6
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 500

# Relative slack for the monotonicity assertion; EM guarantees
# non-decreasing log-likelihood up to floating-point noise.
_LL_SLACK = 1e-9


@dataclass(frozen=True)
class StudyPoint:
    """One study's (SBP mean, DBP mean) for a sex, weighted by cohort size."""

    sbp: float
    dbp: float
    weight: float
    pmid: str = ""


@dataclass
class Gaussian2D:
    mean: np.ndarray
    covariance: np.ndarray


@dataclass
class GaussianMixture:
    """K weighted Gaussian components plus fit metadata."""

    weights: np.ndarray        # (k,), sums to 1
    means: np.ndarray          # (k, 2) as (sbp, dbp)
    covariances: np.ndarray    # (k, 2, 2)
    log_likelihood: float = math.nan
    n_iter: int = 0
    seed: int = 0
    converged: bool = False
    ll_history: list = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def components(self) -> list:
        return [
            (float(w), Gaussian2D(mean=m.copy(), covariance=c.copy()))
            for w, m, c in zip(self.weights, self.means, self.covariances)
        ]

    def logpdf(self, points) -> np.ndarray:
        """Mixture log density at each (sbp, dbp) point."""
        log_comp = kernels.component_logpdf(points, self.means, self.covariances)
        return _logsumexp_rows(log_comp + np.log(self.weights))

    def pdf(self, points) -> np.ndarray:
        return np.exp(self.logpdf(points))

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "log_likelihood": self.log_likelihood,
            "iterations": self.n_iter,
            "seed": self.seed,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(
            weights=np.asarray(d["weights"], dtype=float),
            means=np.asarray(d["means"], dtype=float),
            covariances=np.asarray(d["covariances"], dtype=float),
            log_likelihood=float(d.get("log_likelihood", math.nan)),
            n_iter=int(d.get("iterations", 0)),
            seed=int(d.get("seed", 0)),
            converged=bool(d.get("converged", False)),
        )


def to_points(records: Iterable[BPExtraction], sex: str) -> list[StudyPoint]:
    """Project validated records into one weighted point per study.

    Records with a zero (or missing) count for the requested sex are
    skipped with a warning.
    """
    if sex not in ("male", "female"):
        raise ValueError(f"sex must be 'male' or 'female', got {sex!r}")
    count_field = f"n_{sex}"
    points = []
    for record in records:
        count = getattr(record, count_field)
        if not count:
            logger.warning("to_points: %s has no %s cohort, skipping", record.pmid, sex)
            continue
        points.append(StudyPoint(
            sbp=float(getattr(record, f"sbp_mean_{sex}")),
            dbp=float(getattr(record, f"dbp_mean_{sex}")),
            weight=float(count),
            pmid=record.pmid,
        ))
    return points


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _canonical_order(points: Sequence[StudyPoint]) -> list[StudyPoint]:
    return sorted(points, key=lambda p: (p.sbp, p.dbp, p.pmid))


def _kmeanspp_centers(X: np.ndarray, w: np.ndarray, k: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Weighted k-means++ seeding: mass-proportional first pick, then
    mass-times-squared-distance for the rest."""
    n = X.shape[0]
    base = w / w.sum()
    centers = np.empty((k, 2))
    centers[0] = X[int(rng.choice(n, p=base))]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        scores = w * d2
        total = scores.sum()
        if total > 0:
            centers[j] = X[int(rng.choice(n, p=scores / total))]
        else:  # all remaining mass sits on the chosen centers
            centers[j] = X[int(rng.choice(n, p=base))]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _m_step(X: np.ndarray, w: np.ndarray, resp: np.ndarray, reg: float):
    wr = resp * w[:, None]
    mass = wr.sum(axis=0)
    k = resp.shape[1]
    for j in range(k):
        if mass[j] <= 0:
            raise NumericError(f"component {j} collapsed to zero mass")
    weights = mass / w.sum()
    means = (wr.T @ X) / mass[:, None]
    covs = np.empty((k, 2, 2))
    for j in range(k):
        diff = X - means[j]
        cov = (wr[:, j][:, None] * diff).T @ diff / mass[j]
        cov = 0.5 * (cov + cov.T)
        cov[0, 0] += reg
        cov[1, 1] += reg
        covs[j] = cov
    return weights, means, covs


def _check_spd(covs: np.ndarray) -> None:
    for j, cov in enumerate(covs):
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
        if det <= 0 or cov[0, 0] <= 0:
            raise NumericError(
                f"component {j} covariance singular despite regularization"
            )


def fit_gmm(
    points: Sequence[StudyPoint],
    k: int,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    reg: float = DEFAULT_REG,
) -> GaussianMixture:
    """Fit a k-component weighted mixture by EM.

    Terminates when the relative log-likelihood improvement drops below
    tol or after max_iter update rounds. The log-likelihood is asserted
    non-decreasing at every iteration.
    """
    if k < 1:
        raise FitError(f"component count must be >= 1, got {k}")
    if len(points) < k:
        raise FitError(f"{len(points)} points cannot support {k} components")
    ordered = _canonical_order(points)
    X = np.array([(p.sbp, p.dbp) for p in ordered], dtype=np.float64)
    w = np.array([p.weight for p in ordered], dtype=np.float64)
    if np.any(w <= 0):
        raise FitError("point weights must be positive")

    rng = np.random.default_rng(seed)
    centers = _kmeanspp_centers(X, w, k, rng)
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    resp = np.zeros((len(X), k))
    resp[np.arange(len(X)), d2.argmin(axis=1)] = 1.0
    weights, means, covs = _m_step(X, w, resp, reg)
    _check_spd(covs)

    ll_history: list[float] = []
    prev_ll: Optional[float] = None
    converged = False
    n_iter = 0
    for it in range(max_iter):
        log_comp = kernels.component_logpdf(X, means, covs)
        log_weighted = log_comp + np.log(weights)
        log_norm = _logsumexp_rows(log_weighted)
        ll = float(w @ log_norm)
        if prev_ll is not None and ll < prev_ll - _LL_SLACK * max(1.0, abs(prev_ll)):
            raise NumericError(
                f"log-likelihood decreased at iteration {it}: {prev_ll} -> {ll}"
            )
        ll_history.append(ll)
        if prev_ll is not None and abs(ll - prev_ll) <= tol * max(1.0, abs(prev_ll)):
            converged = True
            n_iter = it
            break
        prev_ll = ll
        resp = np.exp(log_weighted - log_norm[:, None])
        weights, means, covs = _m_step(X, w, resp, reg)
        _check_spd(covs)
        n_iter = it + 1
    else:
        # Ran out of iterations: report the likelihood of the final params.
        log_comp = kernels.component_logpdf(X, means, covs)
        log_norm = _logsumexp_rows(log_comp + np.log(weights))
        ll = float(w @ log_norm)
        ll_history.append(ll)

    return GaussianMixture(
        weights=weights,
        means=means,
        covariances=covs,
        log_likelihood=ll,
        n_iter=n_iter,
        seed=seed,
        converged=converged,
        ll_history=ll_history,
    )


def bic(model: GaussianMixture, points: Sequence[StudyPoint]) -> float:
    """Bayesian information criterion with effective sample size = total weight.

    Parameter count per component: 2 mean + 3 covariance, plus k-1 free
    mixture weights.
    """
    n_eff = float(sum(p.weight for p in points))
    n_params = 6 * model.k - 1
    return -2.0 * model.log_likelihood + n_params * math.log(n_eff)


def select_components(
    points: Sequence[StudyPoint],
    k_max: int,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    reg: float = DEFAULT_REG,
) -> tuple[int, GaussianMixture]:
    """Fit k = 1..k_max and pick the minimal-BIC model, ties toward smaller k.

    Component counts that fail to fit (too few points, collapsed
    component) are skipped; if every k fails the last error propagates.
    """
    if k_max < 1:
        raise FitError(f"k_max must be >= 1, got {k_max}")
    best: Optional[tuple[float, int, GaussianMixture]] = None
    last_error: Optional[Exception] = None
    for k in range(1, k_max + 1):
        try:
            model = fit_gmm(points, k, seed=seed, tol=tol, max_iter=max_iter, reg=reg)
        except (FitError, NumericError) as exc:
            logger.warning("select_components: k=%d failed (%s)", k, exc)
            last_error = exc
            continue
        score = bic(model, points)
        logger.debug("select_components: k=%d bic=%.3f", k, score)
        if best is None or score < best[0]:
            best = (score, k, model)
    if best is None:
        raise FitError(f"all component counts up to {k_max} failed") from last_error
    return best[1], best[2]
