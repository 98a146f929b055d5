"""View database: ordering, inverted index and candidate selection."""

import numpy as np
import pytest

from overlap.core.database import ViewDatabase, group_candidates, select_candidate
from overlap.core.errors import DatabaseOrderError
from overlap.ml.vocabulary import score
from overlap.models.schemas import BowVector, FrameFeatures
from tests.conftest import random_bow


def _empty_features(t):
    return FrameFeatures(t)


def test_add_to_empty_database():
    db = ViewDatabase()
    db.add(0, BowVector({1: 1.0}), _empty_features(0))
    assert len(db) == 1
    assert 0 in db


def test_inverted_index_lists_frames_with_word():
    db = ViewDatabase()
    db.add(0, BowVector({1: 1.0}), _empty_features(0))
    db.add(1, BowVector({1: 0.5, 7: 0.5}), _empty_features(1))
    db.add(2, BowVector({2: 1.0}), _empty_features(2))
    assert db.frames_with_word(7) == [1]
    assert db.frames_with_word(1) == [0, 1]
    assert db.inverted_index == db.rebuild_inverted_index()


def test_frame_indices_must_increase():
    db = ViewDatabase()
    db.add(2, BowVector({1: 1.0}), _empty_features(2))
    with pytest.raises(DatabaseOrderError):
        db.add(2, BowVector({1: 1.0}), _empty_features(2))
    with pytest.raises(DatabaseOrderError):
        db.add(1, BowVector({1: 1.0}), _empty_features(1))
    assert db.frame_indices == [2]


def test_query_on_empty_database():
    assert ViewDatabase().query(BowVector({1: 1.0}), 0.03, 50, 30, 3.0) is None


def test_query_identical_frame():
    db = ViewDatabase()
    bow = BowVector({3: 0.25, 9: 0.75})
    db.add(5, bow, _empty_features(5))
    candidate = db.query(bow, alpha=0.03, n_candidates=50, acquisition_rate=30, beta=3.0)
    assert candidate.matched_frame == 5
    assert candidate.score == pytest.approx(1.0)


def test_best_view_of_best_group():
    scored = [(10, 0.5), (11, 0.4), (300, 0.6)]
    groups = group_candidates(scored, span=90)
    assert [[f for f, _ in g] for g in groups] == [[10, 11], [300]]
    candidate = select_candidate(scored, alpha=0.03, cap=1500, span=90)
    assert candidate.matched_frame == 10
    assert candidate.group_range == (10, 11)


def test_alpha_threshold_and_zero_scores():
    assert select_candidate([(1, 0.02), (2, 0.0)], alpha=0.03, cap=10, span=90) is None
    assert select_candidate([(1, 0.0)], alpha=0.0, cap=10, span=90) is None


def test_group_span_is_measured_from_first_member():
    groups = group_candidates([(0, 0.1), (60, 0.1), (120, 0.1)], span=90)
    assert [[f for f, _ in g] for g in groups] == [[0, 60], [120]]


def test_min_group_size_filters_singletons():
    scored = [(10, 0.3), (12, 0.3), (200, 0.9)]
    assert select_candidate(scored, 0.03, 100, 90, min_group_size=1).matched_frame == 200
    assert select_candidate(scored, 0.03, 100, 90, min_group_size=2).matched_frame == 10


def test_cap_keeps_best_scores():
    scored = [(0, 0.9), (200, 0.2), (201, 0.2), (202, 0.2), (203, 0.2), (204, 0.2)]
    # uncapped, the five-frame group wins on summed score
    assert select_candidate(scored, 0.03, 100, 90).matched_frame == 200
    assert select_candidate(scored, 0.03, 2, 90).matched_frame == 0


def _brute_force(frames, v_q, alpha, n_candidates, rate, beta):
    scored = [(t, score(v_q, bow)) for t, bow in frames]
    return select_candidate(scored, alpha, n_candidates * rate, beta * rate)


def test_query_matches_brute_force_scoring():
    rng = np.random.default_rng(2024)
    db = ViewDatabase()
    frames = []
    for t in range(200):
        bow = random_bow(rng, vocabulary_size=400, n_words=25)
        db.add(t, bow, _empty_features(t))
        frames.append((t, bow))

    for _ in range(100):
        v_q = random_bow(rng, vocabulary_size=400, n_words=25)
        expected = _brute_force(frames, v_q, 0.03, 2, 10, 3.0)
        indexed = db.query(v_q, 0.03, 2, 10, 3.0, use_index=True)
        scanned = db.query(v_q, 0.03, 2, 10, 3.0, use_index=False)
        assert indexed == expected
        assert scanned == expected
