"""Outcome classification, metrics, repetitions and reports."""

import numpy as np
import pandas as pd
import pytest

from overlap.core.errors import ClassificationError
from overlap.models.schemas import (
    Outcome,
    OutcomeCounts,
    PairMetrics,
    RecognitionLog,
    ReplyMessage,
    ReplyStatus,
    RoundRecord,
)
from overlap.services.evaluation import (
    AnnotationIndex,
    PairEvaluation,
    aggregate_repetitions,
    classify_outcome,
    comparison_table,
    compute_metrics,
    count_outcomes,
    evaluate_pair,
    report_table,
)

MATCH = ReplyStatus.MATCH
NO_MATCH = ReplyMessage(ReplyStatus.NO_MATCH)


def _table(n_1, n_2, valid_pairs):
    rows = [
        {"frame_a": a, "frame_b": b, "valid": (a, b) in valid_pairs}
        for a in range(n_1)
        for b in range(n_2)
    ]
    return pd.DataFrame(rows)


@pytest.fixture
def index():
    return AnnotationIndex.from_table(_table(10, 10, {(3, 7), (3, 8), (5, 5)}))


def _match(frame):
    return ReplyMessage(MATCH, frame, 20)


def test_index_flags(index):
    assert index.has_valid(1, 3) and index.has_valid(1, 5)
    assert not index.has_valid(1, 4)
    assert index.has_valid(2, 7) and not index.has_valid(2, 3)
    # frame 3 of camera 1 has two valid partners but is annotated once
    assert index.n_annotated(1) == 2
    assert index.n_annotated(2) == 3


def test_classify_outcomes(index):
    assert classify_outcome(3, _match(7), index) == Outcome.TP
    assert classify_outcome(3, _match(8), index) == Outcome.TP
    assert classify_outcome(3, _match(6), index) == Outcome.FP
    assert classify_outcome(4, _match(7), index) == Outcome.FP
    assert classify_outcome(3, NO_MATCH, index) == Outcome.FN
    assert classify_outcome(4, NO_MATCH, index) == Outcome.TN


def test_camera_two_queries_use_flipped_pairs(index):
    assert classify_outcome(7, _match(3), index, query_camera=2) == Outcome.TP
    assert classify_outcome(3, _match(7), index, query_camera=2) == Outcome.FP
    assert classify_outcome(8, NO_MATCH, index, query_camera=2) == Outcome.FN


def test_initialising_is_not_a_query_event(index):
    assert classify_outcome(3, ReplyMessage(ReplyStatus.INITIALISING), index) is None
    assert classify_outcome(3, None, index) is None


def test_frames_outside_annotations_raise(index):
    with pytest.raises(ClassificationError):
        classify_outcome(10, NO_MATCH, index)
    with pytest.raises(ClassificationError):
        classify_outcome(3, _match(42), index)


def test_metrics_of_mixed_counts():
    metrics = compute_metrics(OutcomeCounts(3, 1, 2, 4), OutcomeCounts(1, 1, 2, 6))
    assert metrics.precision == pytest.approx(4 / 6)
    assert metrics.recall == pytest.approx(4 / 8)
    assert metrics.accuracy == pytest.approx(14 / 20)
    assert metrics.as_percentages() == {"P": 66.67, "R": 50.0, "A": 70.0}


def test_metrics_with_empty_denominators():
    metrics = compute_metrics(OutcomeCounts(tn=10), OutcomeCounts())
    assert (metrics.precision, metrics.recall, metrics.accuracy) == (0.0, 0.0, 1.0)
    assert compute_metrics(OutcomeCounts(), OutcomeCounts()) == PairMetrics(0.0, 0.0, 0.0)


def test_metrics_are_symmetric_in_cameras():
    a, b = OutcomeCounts(5, 2, 1, 7), OutcomeCounts(0, 3, 4, 2)
    assert compute_metrics(a, b) == compute_metrics(b, a)


def test_repetition_medians():
    runs = [PairMetrics(0.1, 0.5, 0.1), PairMetrics(0.3, 0.5, 0.3), PairMetrics(0.2, 0.5, 0.2)]
    summary = aggregate_repetitions(runs)
    assert summary.median.accuracy == pytest.approx(0.2)
    assert summary.median.recall == pytest.approx(0.5)
    assert summary.mean.accuracy == pytest.approx(0.2)
    assert summary.std.accuracy == pytest.approx(np.std([0.1, 0.2, 0.3]))
    assert summary.n_runs == 3


def test_median_of_majority_value():
    rng = np.random.default_rng(0)
    values = [0.42] * 16 + rng.uniform(0, 1, size=14).tolist()
    runs = [PairMetrics(v, v, v) for v in rng.permutation(values)]
    assert aggregate_repetitions(runs).median.precision == pytest.approx(0.42)


def test_even_count_uses_lower_median():
    runs = [PairMetrics(v, v, v) for v in (0.4, 0.1, 0.3, 0.2)]
    assert aggregate_repetitions(runs).median.accuracy == pytest.approx(0.2)


def test_aggregate_requires_runs():
    with pytest.raises(ValueError):
        aggregate_repetitions([])


def _log(camera_id, events):
    log = RecognitionLog(camera_id=camera_id, complete=True)
    for i, (frame, reply) in enumerate(events):
        log.rounds.append(RoundRecord(i, frame, True, reply))
    return log


def test_count_outcomes_skips_heartbeat_rounds(index):
    log = _log(1, [(3, _match(7)), (4, NO_MATCH)])
    log.rounds.append(RoundRecord(2, 5, False, NO_MATCH))
    counts = count_outcomes(log, index)
    assert (counts.tp, counts.fp, counts.fn, counts.tn) == (1, 0, 0, 1)


def test_evaluate_pair_accepts_logs_in_any_order(index):
    log_1 = _log(1, [(3, _match(7)), (5, NO_MATCH), (6, NO_MATCH)])
    log_2 = _log(2, [(5, _match(5)), (7, _match(1))])
    forward = evaluate_pair(log_1, log_2, index)
    backward = evaluate_pair(log_2, log_1, index)
    assert forward.metrics == backward.metrics
    c = forward.counts
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 1)
    assert (forward.n_queries_1, forward.n_queries_2) == (3, 2)


def test_evaluate_pair_needs_both_cameras(index):
    with pytest.raises(ClassificationError):
        evaluate_pair(_log(1, []), _log(1, []), index)


def _brute_force(log_1, log_2, table):
    valid = {(int(r.frame_a), int(r.frame_b)) for r in table.itertuples() if r.valid}
    tp = fp = fn = tn = 0
    for log in (log_1, log_2):
        for r in log.rounds:
            if not r.shared or r.reply is None or r.reply.status == ReplyStatus.INITIALISING:
                continue
            if log.camera_id == 1:
                has_valid = any(a == r.frame_index for a, _ in valid)
                pair = (r.frame_index, r.reply.matched_frame)
            else:
                has_valid = any(b == r.frame_index for _, b in valid)
                pair = (r.reply.matched_frame, r.frame_index)
            if r.reply.status == ReplyStatus.MATCH:
                tp, fp = (tp + 1, fp) if pair in valid else (tp, fp + 1)
            else:
                fn, tn = (fn + 1, tn) if has_valid else (fn, tn + 1)
    total = tp + fp + fn + tn
    return (
        tp / (tp + fp) if tp + fp else 0.0,
        tp / (tp + fn) if tp + fn else 0.0,
        (tp + tn) / total if total else 0.0,
    )


def test_metrics_agree_with_brute_force():
    rng = np.random.default_rng(31)
    for _ in range(20):
        n = 40
        valid = {(int(a), int(b)) for a, b in rng.integers(0, n, size=(60, 2))}
        table = _table(n, n, valid)
        index = AnnotationIndex.from_table(table)

        def random_log(camera_id):
            events = []
            for t in range(n):
                roll = rng.random()
                if roll < 0.1:
                    reply = ReplyMessage(ReplyStatus.INITIALISING)
                elif roll < 0.6:
                    reply = _match(int(rng.integers(0, n)))
                else:
                    reply = NO_MATCH
                events.append((t, reply))
            return _log(camera_id, events)

        log_1, log_2 = random_log(1), random_log(2)
        metrics = evaluate_pair(log_1, log_2, index).metrics
        expected = _brute_force(log_1, log_2, table)
        assert (metrics.precision, metrics.recall, metrics.accuracy) == pytest.approx(expected)


def _evaluation(run, counts):
    return PairEvaluation(run, OutcomeCounts(*counts), OutcomeCounts(), 10, 10)


def test_report_table(index):
    evaluations = [_evaluation(0, (3, 1, 2, 4)), _evaluation(1, (4, 0, 1, 5))]
    table = report_table("synthetic", evaluations, index)
    assert table["run"].tolist() == ["0", "1", "median", "mean", "std"]
    assert table.loc[0, "P"] == 75.0
    assert table.loc[0, "n_annotated_cam1"] == 2
    assert table.loc[2, "P"] == 75.0


def test_comparison_table():
    with_geometry = [_evaluation(0, (4, 0, 2, 4))]
    without_geometry = [_evaluation(0, (5, 3, 1, 1))]
    table = comparison_table("synthetic", with_geometry, without_geometry).set_index("stage")
    assert table.loc["two_stage", "P"] == 100.0
    assert table.loc["view_only", "P"] == 62.5
    assert table.loc["delta", "P"] == 37.5
    assert table.loc["delta", "fp"] == -3
