"""
Overlap — Epipolar Geometry.
Fundamental-matrix estimation and RANSAC validation of a candidate view.

Convention: for a query point x_a and its candidate point x_b,
    x_b^T F x_a = 0
so F x_a is the epipolar line in the candidate image and F^T x_b the line in
the query image.

Pipeline of `ransac_verify`:
1. fewer than mu matches -> rejected without estimation
2. minimal 8-samples (all of them when C(n, 8) <= max_iters, else seeded draws)
3. adaptive budget from the best inlier ratio, capped at max_iters
4. refit on the best consensus set
5. accepted iff |inliers| > rho
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np

from overlap.core.errors import DegenerateConfigurationError
from overlap.ml.features import matched_points
from overlap.models.schemas import FrameFeatures, FundamentalMatrix, MatchSet, ValidationResult

logger = logging.getLogger(__name__)

MIN_SAMPLE = 8
DEGENERACY_TOL = 1e-9

MatrixLike = Union[FundamentalMatrix, np.ndarray]
Estimator = Callable[[np.ndarray, np.ndarray], FundamentalMatrix]
ErrorFunction = Callable[[MatrixLike, np.ndarray, np.ndarray], np.ndarray]


def _matrix(f: MatrixLike) -> np.ndarray:
    return f.m if isinstance(f, FundamentalMatrix) else np.asarray(f, dtype=np.float64)


def _homogeneous(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.hstack([points, np.ones((len(points), 1))])


# ============================================================
# 8-point solver
# ============================================================

def normalize_points(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Hartley normalisation: zero mean, RMS distance sqrt(2).

    Returns the normalised homogeneous points (n, 3) and the 3x3 transform T.
    Raises DegenerateConfigurationError for coincident or collinear points.
    """
    points = np.asarray(points, dtype=np.float64)
    centroid = points.mean(axis=0)
    shifted = points - centroid
    rms = math.sqrt(float(np.mean(np.sum(shifted ** 2, axis=1))))
    if rms < DEGENERACY_TOL:
        raise DegenerateConfigurationError("all points coincide")
    scale = math.sqrt(2.0) / rms
    transform = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    normalized = _homogeneous(points) @ transform.T
    singular = np.linalg.svd(normalized, compute_uv=False)
    if singular[-1] < DEGENERACY_TOL * singular[0]:
        raise DegenerateConfigurationError("points are collinear")
    return normalized, transform


def estimate_fundamental_8pt(pts_a: np.ndarray, pts_b: np.ndarray) -> FundamentalMatrix:
    """Normalised 8-point estimate from >= 8 correspondences (a = query, b = candidate)."""
    pts_a = np.asarray(pts_a, dtype=np.float64)
    pts_b = np.asarray(pts_b, dtype=np.float64)
    if pts_a.shape != pts_b.shape or pts_a.ndim != 2 or pts_a.shape[1] != 2:
        raise ValueError(f"expected two (n, 2) arrays; got {pts_a.shape} and {pts_b.shape}")
    if len(pts_a) < MIN_SAMPLE:
        raise ValueError(f"need at least {MIN_SAMPLE} correspondences; got {len(pts_a)}")
    if not (np.all(np.isfinite(pts_a)) and np.all(np.isfinite(pts_b))):
        raise ValueError("point coordinates must be finite")

    na, ta = normalize_points(pts_a)
    nb, tb = normalize_points(pts_b)

    # one row per correspondence of x_b^T F x_a = 0
    design = np.einsum("ni,nj->nij", nb, na).reshape(len(na), 9)
    _, _, vt = np.linalg.svd(design)
    f = vt[-1].reshape(3, 3)

    # rank 2
    u, s, vt = np.linalg.svd(f)
    s[2] = 0.0
    f = u @ np.diag(s) @ vt

    return FundamentalMatrix(tb.T @ f @ ta)


# ============================================================
# Epipolar errors
# ============================================================

def point_line_distances(
    f: MatrixLike, pts_a: np.ndarray, pts_b: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Distance of each x_a to its line F^T x_b, and of each x_b to F x_a (inf for a zero line)."""
    m = _matrix(f)
    xa = _homogeneous(pts_a)
    xb = _homogeneous(pts_b)
    line_b = xa @ m.T
    line_a = xb @ m
    residual = np.abs(np.sum(xb * line_b, axis=1))
    norm_a = np.hypot(line_a[:, 0], line_a[:, 1])
    norm_b = np.hypot(line_b[:, 0], line_b[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        d_a = np.where(norm_a > 0, residual / np.where(norm_a > 0, norm_a, 1.0), np.inf)
        d_b = np.where(norm_b > 0, residual / np.where(norm_b > 0, norm_b, 1.0), np.inf)
    return d_a, d_b


def symmetric_epipolar_errors(f: MatrixLike, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """Mean of the two point-to-epipolar-line distances, in pixels."""
    d_a, d_b = point_line_distances(f, pts_a, pts_b)
    return 0.5 * (d_a + d_b)


def sampson_errors(f: MatrixLike, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """First-order geometric error (square root of the Sampson distance), in pixels."""
    m = _matrix(f)
    xa = _homogeneous(pts_a)
    xb = _homogeneous(pts_b)
    line_b = xa @ m.T
    line_a = xb @ m
    residual = np.sum(xb * line_b, axis=1)
    denom = line_b[:, 0] ** 2 + line_b[:, 1] ** 2 + line_a[:, 0] ** 2 + line_a[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, np.abs(residual) / np.sqrt(np.where(denom > 0, denom, 1.0)), np.inf)


def epipolar_error(f: MatrixLike, x_q, x_m) -> float:
    """Symmetric epipolar error of one correspondence."""
    return float(symmetric_epipolar_errors(f, np.reshape(x_q, (1, 2)), np.reshape(x_m, (1, 2)))[0])


ERROR_FUNCTIONS = {
    "symmetric": symmetric_epipolar_errors,
    "sampson": sampson_errors,
}


# ============================================================
# RANSAC
# ============================================================

@dataclass
class RansacOutcome:
    accepted: bool
    inlier_mask: np.ndarray
    fundamental: Optional[FundamentalMatrix]
    iterations_run: int


def adaptive_budget(inlier_ratio: float, success_p: float, max_iters: int) -> int:
    """Draws needed to hit an all-inlier sample with probability success_p."""
    if inlier_ratio >= 1.0:
        return 1
    if inlier_ratio <= 0.0:
        return max_iters
    denom = math.log1p(-(inlier_ratio ** MIN_SAMPLE))
    if denom == 0.0:
        return max_iters
    return min(max_iters, max(1, math.ceil(math.log(1.0 - success_p) / denom)))


def ransac(
    pts_a: np.ndarray,
    pts_b: np.ndarray,
    mu: int = 8,
    rho: int = 12,
    max_iters: int = 500,
    success_p: float = 0.99,
    tau: float = 2.0,
    seed: int = 0,
    estimator: Estimator = estimate_fundamental_8pt,
    error_fn: ErrorFunction = symmetric_epipolar_errors,
) -> RansacOutcome:
    """RANSAC over raw correspondence arrays."""
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    n = len(pts_a)
    rejected = RansacOutcome(False, np.zeros(n, dtype=bool), None, 0)
    if n < max(mu, MIN_SAMPLE):
        return rejected

    exhaustive = math.comb(n, MIN_SAMPLE) <= max_iters
    if exhaustive:
        samples = (np.array(s) for s in itertools.combinations(range(n), MIN_SAMPLE))
    else:
        rng = np.random.default_rng(seed)
        samples = (rng.choice(n, MIN_SAMPLE, replace=False) for _ in range(max_iters))

    best_mask: Optional[np.ndarray] = None
    best_model: Optional[FundamentalMatrix] = None
    best_count = -1
    budget = max_iters
    fitted = 0
    drawn = 0

    for sample in samples:
        if not exhaustive and fitted >= budget:
            break
        drawn += 1
        try:
            model = estimator(pts_a[sample], pts_b[sample])
        except DegenerateConfigurationError as exc:
            logger.debug("sample %s skipped: %s", sample.tolist(), exc)
            continue
        fitted += 1
        mask = error_fn(model, pts_a, pts_b) <= tau
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_model, best_count = mask, model, count
            if not exhaustive:
                budget = adaptive_budget(count / n, success_p, max_iters)

    if best_model is None:
        return RansacOutcome(False, np.zeros(n, dtype=bool), None, drawn)

    # refit on the consensus set, kept only when it does not lose inliers
    if best_count >= MIN_SAMPLE:
        try:
            refit = estimator(pts_a[best_mask], pts_b[best_mask])
            refit_mask = error_fn(refit, pts_a, pts_b) <= tau
            if int(refit_mask.sum()) >= best_count:
                best_mask, best_model, best_count = refit_mask, refit, int(refit_mask.sum())
        except DegenerateConfigurationError:
            logger.debug("refit on %d inliers degenerate; keeping sample model", best_count)

    return RansacOutcome(best_count > rho, best_mask, best_model, drawn)


def ransac_verify(
    matches: MatchSet,
    query: FrameFeatures,
    candidate: FrameFeatures,
    mu: int = 8,
    rho: int = 12,
    max_iters: int = 500,
    success_p: float = 0.99,
    tau: float = 2.0,
    seed: int = 0,
    estimator: Estimator = estimate_fundamental_8pt,
    error_fn: ErrorFunction = symmetric_epipolar_errors,
) -> ValidationResult:
    """Geometric validation of a query/candidate match set."""
    if len(matches) < mu:
        return ValidationResult(accepted=False, inliers=MatchSet(), iterations_run=0)
    pts_a, pts_b = matched_points(matches, query, candidate)
    outcome = ransac(
        pts_a, pts_b,
        mu=mu, rho=rho, max_iters=max_iters, success_p=success_p, tau=tau,
        seed=seed, estimator=estimator, error_fn=error_fn,
    )
    return ValidationResult(
        accepted=outcome.accepted,
        inliers=matches.subset(outcome.inlier_mask),
        fundamental=outcome.fundamental,
        iterations_run=outcome.iterations_run,
    )
