"""8-point solver, epipolar errors and RANSAC validation."""

import numpy as np
import pytest

from overlap.core.errors import DegenerateConfigurationError
from overlap.ml.geometry import (
    adaptive_budget,
    epipolar_error,
    estimate_fundamental_8pt,
    point_line_distances,
    ransac,
    ransac_verify,
    sampson_errors,
    symmetric_epipolar_errors,
)
from overlap.models.schemas import FrameFeatures, FundamentalMatrix, MatchPair, MatchSet
from tests.conftest import two_view_set


def _residuals(f, pts_a, pts_b):
    xa = np.column_stack([pts_a, np.ones(len(pts_a))])
    xb = np.column_stack([pts_b, np.ones(len(pts_b))])
    return np.abs(np.sum(xb * (xa @ f.T), axis=1))


def test_eight_point_on_exact_correspondences(rng):
    pts_a, pts_b, _, _ = two_view_set(rng, n_inliers=20, n_outliers=0)
    f = estimate_fundamental_8pt(pts_a, pts_b)
    assert np.all(_residuals(f.m, pts_a, pts_b) <= 1e-6)
    assert abs(np.linalg.det(f.m)) <= 1e-9
    assert np.linalg.norm(f.m) == pytest.approx(1.0)


def test_eight_point_recovers_true_geometry(rng):
    pts_a, pts_b, _, f_true = two_view_set(rng, n_inliers=30, n_outliers=0)
    assert estimate_fundamental_8pt(pts_a, pts_b).allclose(FundamentalMatrix(f_true), atol=1e-6)


def test_coincident_points_are_degenerate():
    pts = np.tile([[100.0, 50.0]], (8, 1))
    other = np.random.default_rng(0).uniform(0, 400, size=(8, 2))
    with pytest.raises(DegenerateConfigurationError):
        estimate_fundamental_8pt(pts, other)


def test_collinear_points_are_degenerate():
    line = np.column_stack([np.linspace(0, 300, 8), np.linspace(10, 160, 8)])
    other = np.random.default_rng(0).uniform(0, 400, size=(8, 2))
    with pytest.raises(DegenerateConfigurationError):
        estimate_fundamental_8pt(other, line)


def test_too_few_points_rejected():
    with pytest.raises(ValueError):
        estimate_fundamental_8pt(np.zeros((7, 2)), np.zeros((7, 2)))


def test_scaling_invariance(rng):
    pts_a, pts_b, _, _ = two_view_set(rng, n_inliers=12, n_outliers=0)
    f = estimate_fundamental_8pt(pts_a, pts_b)
    scaled = estimate_fundamental_8pt(10.0 * pts_a, 10.0 * pts_b)
    s = np.diag([10.0, 10.0, 1.0])
    assert FundamentalMatrix(s.T @ scaled.m @ s).allclose(f, atol=1e-6)


def test_exact_correspondence_has_zero_error(rng):
    pts_a, pts_b, _, f_true = two_view_set(rng, n_inliers=5, n_outliers=0)
    f = FundamentalMatrix(f_true)
    for a, b in zip(pts_a, pts_b):
        assert epipolar_error(f, a, b) <= 1e-6


def test_orthogonal_perturbation_on_rectified_pair():
    # pure horizontal translation: epipolar lines are image rows
    f = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    a = np.array([120.0, 80.0])
    b = np.array([90.0, 85.0])
    d_a, d_b = point_line_distances(f, a[None], b[None])
    assert d_b[0] == pytest.approx(5.0)
    assert d_a[0] == pytest.approx(5.0)
    assert epipolar_error(f, a, b) == pytest.approx(5.0)


def test_perturbation_moves_candidate_point_off_its_line(rng):
    pts_a, pts_b, _, f_true = two_view_set(rng, n_inliers=1, n_outliers=0)
    f = FundamentalMatrix(f_true).m
    a, b = pts_a[0], pts_b[0]
    line = f @ np.array([a[0], a[1], 1.0])
    normal = line[:2] / np.linalg.norm(line[:2])
    moved = b + 5.0 * normal
    d_a, d_b = point_line_distances(f, a[None], moved[None])
    assert d_b[0] == pytest.approx(5.0, abs=1e-6)
    assert epipolar_error(f, a, moved) == pytest.approx(0.5 * (d_a[0] + d_b[0]))


def test_zero_epipolar_line_gives_infinite_error():
    f = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert epipolar_error(f, [0.0, 0.0], [0.0, 0.0]) == np.inf


def test_errors_are_finite_and_non_negative(rng):
    m = rng.normal(size=(3, 3))
    u, s, vt = np.linalg.svd(m)
    f = u @ np.diag([s[0], s[1], 0.0]) @ vt
    pts_a = rng.uniform(0, 640, size=(50, 2))
    pts_b = rng.uniform(0, 480, size=(50, 2))
    for errors in (symmetric_epipolar_errors(f, pts_a, pts_b), sampson_errors(f, pts_a, pts_b)):
        assert np.all(np.isfinite(errors)) and np.all(errors >= 0)


def test_adaptive_budget():
    assert adaptive_budget(1.0, 0.99, 500) == 1
    assert adaptive_budget(0.0, 0.99, 500) == 500
    assert adaptive_budget(0.5, 0.99, 500) == 500
    assert adaptive_budget(0.9, 0.99, 500) == 9


def _as_frames(pts_a, pts_b):
    rng = np.random.default_rng(5)
    descriptors = rng.integers(0, 256, size=(len(pts_a), 32), dtype=np.uint8)
    matches = MatchSet([MatchPair(i, i, 0) for i in range(len(pts_a))])
    return matches, FrameFeatures(0, pts_a, descriptors), FrameFeatures(1, pts_b, descriptors)


def test_ransac_rejects_below_mu():
    pts = np.random.default_rng(0).uniform(0, 400, size=(7, 2))
    matches, query, candidate = _as_frames(pts, pts)
    result = ransac_verify(matches, query, candidate, mu=8)
    assert not result.accepted
    assert result.iterations_run == 0
    assert len(result.inliers) == 0


@pytest.mark.parametrize("geometry", range(20))
def test_ransac_recovers_inliers_with_outliers(geometry):
    rng = np.random.default_rng(1000 + geometry)
    pts_a, pts_b, is_inlier, _ = two_view_set(rng, n_inliers=70, n_outliers=30, tau=2.0)
    outcome = ransac(pts_a, pts_b, mu=8, rho=12, max_iters=500, success_p=0.99, tau=2.0, seed=geometry)
    assert outcome.accepted
    assert outcome.inlier_mask[is_inlier].mean() >= 0.95
    assert not np.any(outcome.inlier_mask[~is_inlier])
    f = outcome.fundamental.m
    assert np.linalg.norm(f) == pytest.approx(1.0)
    assert abs(np.linalg.det(f)) <= 1e-9
    assert np.all(symmetric_epipolar_errors(f, pts_a[outcome.inlier_mask], pts_b[outcome.inlier_mask]) <= 2.0)


def test_ransac_rejects_random_matches():
    rng = np.random.default_rng(77)
    pts_a = rng.uniform([0, 0], [640, 480], size=(20, 2))
    pts_b = rng.uniform([0, 0], [640, 480], size=(20, 2))
    matches, query, candidate = _as_frames(pts_a, pts_b)
    first = ransac_verify(matches, query, candidate, seed=3)
    second = ransac_verify(matches, query, candidate, seed=3)
    assert not first.accepted
    assert first.inliers.pairs == second.inliers.pairs
    assert first.iterations_run == second.iterations_run


def test_ransac_is_deterministic_per_seed(rng):
    pts_a, pts_b, _, _ = two_view_set(rng, n_inliers=40, n_outliers=20)
    matches, query, candidate = _as_frames(pts_a, pts_b)
    first = ransac_verify(matches, query, candidate, seed=11)
    second = ransac_verify(matches, query, candidate, seed=11)
    assert first.accepted == second.accepted
    assert first.inliers.pairs == second.inliers.pairs
    assert first.fundamental.allclose(second.fundamental, atol=0.0)


def test_every_reported_inlier_is_within_tau(rng):
    pts_a, pts_b, _, _ = two_view_set(rng, n_inliers=50, n_outliers=25)
    matches, query, candidate = _as_frames(pts_a, pts_b)
    for error_fn in (symmetric_epipolar_errors, sampson_errors):
        result = ransac_verify(matches, query, candidate, seed=1, error_fn=error_fn)
        assert result.accepted and len(result.inliers) > 12
        idx = result.inliers.query_indices
        cidx = result.inliers.candidate_indices
        assert np.all(error_fn(result.fundamental, query.points[idx], candidate.points[cidx]) <= 2.0)


def test_small_sets_are_enumerated_exhaustively(rng):
    # C(9, 8) = 9 subsets, fewer than max_iters
    pts_a, pts_b, _, _ = two_view_set(rng, n_inliers=9, n_outliers=0)
    outcome = ransac(pts_a, pts_b, mu=8, rho=8, max_iters=500)
    assert outcome.iterations_run == 9
    assert outcome.accepted and outcome.inlier_mask.all()


def test_identical_point_sets_are_not_degenerate(rng):
    pts = rng.uniform([0, 0], [640, 480], size=(30, 2))
    outcome = ransac(pts, pts.copy(), rho=12)
    assert outcome.accepted and outcome.inlier_mask.all()
