"""Shared fixtures and synthetic data builders."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from overlap.core.config import load_peer_config
from overlap.ml.geometry import symmetric_epipolar_errors
from overlap.models.schemas import BowVector, FrameFeatures

K = np.array([[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]])
WIDTH, HEIGHT = 640, 480


def random_descriptors(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 256, size=(n, 32), dtype=np.uint8)


def random_features(rng: np.random.Generator, n: int, frame_index: int = 0) -> FrameFeatures:
    points = rng.uniform([0, 0], [WIDTH, HEIGHT], size=(n, 2))
    return FrameFeatures(frame_index, points, random_descriptors(rng, n))


def random_bow(rng: np.random.Generator, vocabulary_size: int = 500, n_words: int = 20) -> BowVector:
    words = rng.choice(vocabulary_size, size=n_words, replace=False)
    weights = rng.uniform(0.1, 1.0, size=n_words)
    return BowVector({int(w): float(v) for w, v in zip(words, weights)}).normalized()


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def true_fundamental(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    """F with x_b^T F x_a = 0 for x_b ~ K (R X_a + t), x_a ~ K X_a."""
    k_inv = np.linalg.inv(K)
    return k_inv.T @ skew(translation) @ rotation @ k_inv


def two_view_set(rng: np.random.Generator, n_inliers: int = 70, n_outliers: int = 30, tau: float = 2.0):
    """
    Exact correspondences of a random two-view geometry plus outliers whose
    error under the true geometry exceeds 3 * tau.

    Returns (pts_a, pts_b, is_inlier, F_true).
    """
    rotation = Rotation.from_rotvec(rng.normal(scale=0.08, size=3)).as_matrix()
    translation = rng.normal(size=3)
    translation[2] *= 0.3
    translation /= np.linalg.norm(translation)

    inliers_a, inliers_b = [], []
    while len(inliers_a) < n_inliers:
        uv = rng.uniform([0, 0], [WIDTH, HEIGHT], size=(4 * n_inliers, 2))
        depth = rng.uniform(4.0, 12.0, size=len(uv))
        rays = np.column_stack([uv, np.ones(len(uv))]) @ np.linalg.inv(K).T
        x_a = rays * depth[:, None]
        x_b = x_a @ rotation.T + translation
        proj = x_b @ K.T
        uv_b = proj[:, :2] / proj[:, 2:3]
        ok = (
            (x_b[:, 2] > 0.5)
            & (uv_b[:, 0] >= 0) & (uv_b[:, 0] <= WIDTH)
            & (uv_b[:, 1] >= 0) & (uv_b[:, 1] <= HEIGHT)
        )
        inliers_a.extend(uv[ok].tolist())
        inliers_b.extend(uv_b[ok].tolist())
    pts_a = np.array(inliers_a[:n_inliers])
    pts_b = np.array(inliers_b[:n_inliers])

    f_true = true_fundamental(rotation, translation)
    outliers_a, outliers_b = [], []
    while len(outliers_a) < n_outliers:
        a = rng.uniform([0, 0], [WIDTH, HEIGHT], size=(1, 2))
        b = rng.uniform([0, 0], [WIDTH, HEIGHT], size=(1, 2))
        if symmetric_epipolar_errors(f_true, a, b)[0] > 3 * tau:
            outliers_a.append(a[0])
            outliers_b.append(b[0])

    all_a = np.vstack([pts_a, np.array(outliers_a).reshape(-1, 2)])
    all_b = np.vstack([pts_b, np.array(outliers_b).reshape(-1, 2)])
    is_inlier = np.zeros(len(all_a), dtype=bool)
    is_inlier[:n_inliers] = True
    order = rng.permutation(len(all_a))
    return all_a[order], all_b[order], is_inlier[order], f_true


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def peer_defaults():
    return load_peer_config()
