"""
Overlap — Evaluation Harness.
Scores recognition logs against the annotation table.

Workflow:
1. Index the annotation table (valid pairs, frame ranges, per-frame flags)
2. Classify every query event of each camera's log as TP / FP / FN / TN
3. Sum the counts of both cameras, then precision / recall / accuracy
4. Repetitions: lower median, mean and standard deviation per measure
5. Reports: per-run table plus summary rows, and the two-stage comparison
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from overlap.core.errors import ClassificationError
from overlap.models.schemas import (
    Outcome,
    OutcomeCounts,
    PairMetrics,
    RecognitionLog,
    ReplyMessage,
    ReplyStatus,
)

logger = logging.getLogger(__name__)

REPORT_COLUMNS = [
    "pair", "run", "n_queries_cam1", "n_queries_cam2", "n_annotated_cam1", "n_annotated_cam2",
    "tp", "fp", "fn", "tn", "P", "R", "A",
]
COMPARISON_COLUMNS = ["pair", "stage", "P", "R", "A", "fp"]


# ============================================================
# Annotation index
# ============================================================

@dataclass(frozen=True)
class AnnotationIndex:
    """Valid pairs are (camera-1 frame, camera-2 frame) whichever camera queried."""

    valid_pairs: FrozenSet[Tuple[int, int]]
    frames_1: FrozenSet[int]
    frames_2: FrozenSet[int]
    valid_1: FrozenSet[int] = frozenset()
    valid_2: FrozenSet[int] = frozenset()

    @classmethod
    def from_table(cls, table: pd.DataFrame) -> "AnnotationIndex":
        valid = table[table["valid"].astype(bool)]
        pairs = frozenset(zip(valid["frame_a"].astype(int), valid["frame_b"].astype(int)))
        return cls(
            valid_pairs=pairs,
            frames_1=frozenset(table["frame_a"].astype(int).unique().tolist()),
            frames_2=frozenset(table["frame_b"].astype(int).unique().tolist()),
            valid_1=frozenset(a for a, _ in pairs),
            valid_2=frozenset(b for _, b in pairs),
        )

    def frames(self, camera_id: int) -> FrozenSet[int]:
        return self.frames_1 if camera_id == 1 else self.frames_2

    def has_valid(self, camera_id: int, frame: int) -> bool:
        return frame in (self.valid_1 if camera_id == 1 else self.valid_2)

    def is_valid(self, query_camera: int, query_frame: int, matched_frame: int) -> bool:
        pair = (query_frame, matched_frame) if query_camera == 1 else (matched_frame, query_frame)
        return pair in self.valid_pairs

    def n_annotated(self, camera_id: int) -> int:
        """Frames with at least one valid correspondence, each counted once."""
        return len(self.valid_1 if camera_id == 1 else self.valid_2)


# ============================================================
# Classification
# ============================================================

def classify_outcome(
    query_frame: int,
    reply: Optional[ReplyMessage],
    index: AnnotationIndex,
    query_camera: int = 1,
) -> Optional[Outcome]:
    """Outcome of one query event; None for INITIALISING (not a query event)."""
    if reply is None or reply.status == ReplyStatus.INITIALISING:
        return None
    partner = 2 if query_camera == 1 else 1
    if query_frame not in index.frames(query_camera):
        raise ClassificationError(
            f"camera {query_camera} frame {query_frame} is not covered by the annotations"
        )

    if reply.status == ReplyStatus.MATCH:
        if reply.matched_frame not in index.frames(partner):
            raise ClassificationError(
                f"camera {query_camera} frame {query_frame} matched camera {partner} "
                f"frame {reply.matched_frame}, outside its sequence"
            )
        return Outcome.TP if index.is_valid(query_camera, query_frame, reply.matched_frame) else Outcome.FP

    return Outcome.FN if index.has_valid(query_camera, query_frame) else Outcome.TN


def count_outcomes(log: RecognitionLog, index: AnnotationIndex) -> OutcomeCounts:
    counts = OutcomeCounts()
    for record in log.queries:
        outcome = classify_outcome(record.frame_index, record.reply, index, log.camera_id)
        if outcome is not None:
            counts.add(outcome)
    return counts


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute_metrics(counts_1: OutcomeCounts, counts_2: OutcomeCounts) -> PairMetrics:
    """Counts are summed across cameras first; an empty denominator gives 0."""
    c = counts_1 + counts_2
    return PairMetrics(
        precision=_ratio(c.tp, c.tp + c.fp),
        recall=_ratio(c.tp, c.tp + c.fn),
        accuracy=_ratio(c.tp + c.tn, c.total),
    )


# ============================================================
# Repetitions
# ============================================================

@dataclass(frozen=True)
class RepetitionSummary:
    median: PairMetrics
    mean: PairMetrics
    std: PairMetrics
    n_runs: int


def _lower_median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def aggregate_repetitions(per_run: Sequence[PairMetrics]) -> RepetitionSummary:
    if not per_run:
        raise ValueError("aggregate_repetitions needs at least one run")
    table = np.array([[m.precision, m.recall, m.accuracy] for m in per_run], dtype=np.float64)
    return RepetitionSummary(
        median=PairMetrics(*(_lower_median(table[:, k].tolist()) for k in range(3))),
        mean=PairMetrics(*table.mean(axis=0).tolist()),
        std=PairMetrics(*table.std(axis=0).tolist()),
        n_runs=len(per_run),
    )


# ============================================================
# Pair evaluation & reports
# ============================================================

@dataclass
class PairEvaluation:
    run: int
    counts_1: OutcomeCounts
    counts_2: OutcomeCounts
    n_queries_1: int
    n_queries_2: int
    metrics: PairMetrics = field(init=False)

    def __post_init__(self):
        self.metrics = compute_metrics(self.counts_1, self.counts_2)

    @property
    def counts(self) -> OutcomeCounts:
        return self.counts_1 + self.counts_2


def evaluate_pair(
    log_1: RecognitionLog, log_2: RecognitionLog, index: AnnotationIndex, run: int = 0
) -> PairEvaluation:
    if {log_1.camera_id, log_2.camera_id} != {1, 2}:
        raise ClassificationError(
            f"expected logs of cameras 1 and 2, got {log_1.camera_id} and {log_2.camera_id}"
        )
    if log_1.camera_id == 2:
        log_1, log_2 = log_2, log_1
    for log in (log_1, log_2):
        if not log.complete:
            logger.warning("camera %d log of run %d is partial", log.camera_id, run)

    evaluation = PairEvaluation(
        run=run,
        counts_1=count_outcomes(log_1, index),
        counts_2=count_outcomes(log_2, index),
        n_queries_1=len(log_1.queries),
        n_queries_2=len(log_2.queries),
    )
    c = evaluation.counts
    logger.info(
        "run %d: TP=%d FP=%d FN=%d TN=%d -> %s",
        run, c.tp, c.fp, c.fn, c.tn, evaluation.metrics.as_percentages(),
    )
    return evaluation


def _summary_row(pair: str, label: str, metrics: PairMetrics) -> Dict[str, object]:
    pct = metrics.as_percentages()
    return {"pair": pair, "run": label, "P": pct["P"], "R": pct["R"], "A": pct["A"]}


def report_table(pair: str, evaluations: Sequence[PairEvaluation], index: AnnotationIndex) -> pd.DataFrame:
    """One row per run, then median / mean / std rows."""
    rows: List[Dict[str, object]] = []
    for ev in evaluations:
        c = ev.counts
        pct = ev.metrics.as_percentages()
        rows.append(
            {
                "pair": pair,
                "run": str(ev.run),
                "n_queries_cam1": ev.n_queries_1,
                "n_queries_cam2": ev.n_queries_2,
                "n_annotated_cam1": index.n_annotated(1),
                "n_annotated_cam2": index.n_annotated(2),
                "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
                "P": pct["P"], "R": pct["R"], "A": pct["A"],
            }
        )
    summary = aggregate_repetitions([ev.metrics for ev in evaluations])
    rows.append(_summary_row(pair, "median", summary.median))
    rows.append(_summary_row(pair, "mean", summary.mean))
    rows.append(_summary_row(pair, "std", summary.std))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def comparison_table(
    pair: str,
    with_geometry: Sequence[PairEvaluation],
    without_geometry: Sequence[PairEvaluation],
) -> pd.DataFrame:
    """Median P/R/A and FP with and without epipolar validation, and the change in points."""
    rows = []
    stages = (("view_only", without_geometry), ("two_stage", with_geometry))
    medians = {}
    for stage, evaluations in stages:
        median = aggregate_repetitions([ev.metrics for ev in evaluations]).median
        fp = int(_lower_median([ev.counts.fp for ev in evaluations]))
        medians[stage] = (median.as_percentages(), fp)
        rows.append({"pair": pair, "stage": stage, **median.as_percentages(), "fp": fp})

    (off, fp_off), (on, fp_on) = medians["view_only"], medians["two_stage"]
    rows.append(
        {
            "pair": pair,
            "stage": "delta",
            "P": round(on["P"] - off["P"], 2),
            "R": round(on["R"] - off["R"], 2),
            "A": round(on["A"] - off["A"], 2),
            "fp": fp_on - fp_off,
        }
    )
    return pd.DataFrame(rows, columns=COMPARISON_COLUMNS)


def save_report(path: Union[str, Path], table: pd.DataFrame) -> None:
    table.to_csv(path, index=False)
