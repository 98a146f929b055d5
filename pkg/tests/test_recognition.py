"""Answering one partner query against the local view database."""

import numpy as np
import pytest

from overlap.core.config import PeerConfig
from overlap.core.database import ViewDatabase
from overlap.ml.vocabulary import build_vocabulary
from overlap.models.schemas import FrameFeatures, QueryMessage, ReplyStatus
from overlap.services.recognition import handle_query, query_seed
from tests.conftest import random_descriptors, two_view_set


@pytest.fixture
def scene(rng):
    pts_a, pts_b, _, _ = two_view_set(rng, n_inliers=70, n_outliers=30)
    descriptors = random_descriptors(rng, len(pts_a))
    vocab = build_vocabulary(descriptors, k_b=4, depth=3, seed=0)
    return pts_a, pts_b, descriptors, vocab


def _database(vocab, features):
    db = ViewDatabase()
    bow, direct = vocab.transform(features, 2)
    db.add(features.frame_index, bow, features, direct)
    return db


def _query(points, descriptors, frame_index=40):
    return QueryMessage(2, frame_index, FrameFeatures(frame_index, points, descriptors))


def _snapshot(db):
    return (
        db.frame_indices,
        db.inverted_index,
        {t: dict(db.get(t).bow.entries) for t in db.frame_indices},
        {t: {n: list(ids) for n, ids in db.get(t).direct_index.items()} for t in db.frame_indices},
        {t: (db.get(t).features.points.copy(), db.get(t).features.descriptors.copy()) for t in db.frame_indices},
    )


def test_consistent_geometry_is_a_match(scene):
    pts_a, pts_b, descriptors, vocab = scene
    db = _database(vocab, FrameFeatures(0, pts_b, descriptors))
    before = _snapshot(db)
    cfg = PeerConfig(camera_id=1)
    reply = handle_query(db, vocab, _query(pts_a, descriptors), cfg)
    assert reply.status == ReplyStatus.MATCH
    assert reply.matched_frame == 0
    assert reply.inlier_count > cfg.rho

    # answering leaves the database untouched
    frames, inverted, bows, direct, features = _snapshot(db)
    assert (frames, inverted, bows, direct) == before[:4]
    for t, (points, desc) in features.items():
        assert np.array_equal(points, before[4][t][0])
        assert np.array_equal(desc, before[4][t][1])


def test_direct_index_matching_agrees(scene):
    pts_a, pts_b, descriptors, vocab = scene
    db = _database(vocab, FrameFeatures(0, pts_b, descriptors))
    query = _query(pts_a, descriptors)
    indexed = handle_query(db, vocab, query, PeerConfig(camera_id=1, use_direct_index=True))
    exhaustive = handle_query(db, vocab, query, PeerConfig(camera_id=1))
    assert indexed.status == ReplyStatus.MATCH
    assert indexed == exhaustive


def test_view_only_match_carries_no_inliers(rng, scene):
    _, _, descriptors, vocab = scene
    n = 30
    stored = FrameFeatures(0, rng.uniform([0, 0], [640, 480], size=(n, 2)), descriptors[:n])
    db = _database(vocab, stored)
    query = _query(rng.uniform([0, 0], [640, 480], size=(n, 2)), descriptors[:n])

    view_only = handle_query(db, vocab, query, PeerConfig(camera_id=1, geometric_validation=False))
    assert (view_only.status, view_only.matched_frame, view_only.inlier_count) == (ReplyStatus.MATCH, 0, 0)

    # same descriptors at unrelated positions fail the epipolar check
    two_stage = handle_query(db, vocab, query, PeerConfig(camera_id=1))
    assert two_stage.status == ReplyStatus.NO_MATCH


def test_too_few_features_is_no_match(scene):
    pts_a, pts_b, descriptors, vocab = scene
    db = _database(vocab, FrameFeatures(0, pts_b, descriptors))
    reply = handle_query(db, vocab, _query(pts_a[:8], descriptors[:8]), PeerConfig(camera_id=1))
    assert reply.status == ReplyStatus.NO_MATCH


def test_empty_database_is_no_match(scene):
    pts_a, _, descriptors, vocab = scene
    reply = handle_query(ViewDatabase(), vocab, _query(pts_a, descriptors), PeerConfig(camera_id=1))
    assert reply.status == ReplyStatus.NO_MATCH


def test_query_seed_is_stable():
    assert query_seed(0, 1, 35) == query_seed(0, 1, 35)
    assert query_seed(0, 1, 35) != query_seed(0, 2, 35)
    assert query_seed(0, 1, 35) != query_seed(1, 1, 35)
