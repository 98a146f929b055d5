"""
Overlap — View Database.
Per-camera store of ingested frames with an inverted word index.

The sequence task is the only writer; query answering reads concurrently.
Appends and index updates happen under one lock, readers take a snapshot of
the frames they need before scoring.
"""

import logging
import threading
from typing import Dict, Iterable, List, Optional, Tuple

from overlap.core.errors import DatabaseOrderError
from overlap.ml.vocabulary import score
from overlap.models.schemas import BowVector, CandidateMatch, FrameFeatures, StoredFrame

logger = logging.getLogger(__name__)


class ViewDatabase:
    """
    Append-only frame store for one camera.

    Each stored frame keeps its BowVector, its local features and its direct
    index; the inverted index maps word id -> frame indices in insertion order.
    """

    def __init__(self):
        self._frames: List[StoredFrame] = []
        self._by_index: Dict[int, StoredFrame] = {}
        self._inverted: Dict[int, List[int]] = {}
        self._lock = threading.Lock()

    # ============================================================
    # Writes
    # ============================================================

    def add(
        self,
        frame_index: int,
        bow: BowVector,
        features: FrameFeatures,
        direct_index: Optional[Dict[int, List[int]]] = None,
    ) -> StoredFrame:
        """Append a frame; its index must exceed every stored index."""
        stored = StoredFrame(frame_index, bow, features, direct_index or {})
        with self._lock:
            if self._frames and frame_index <= self._frames[-1].frame_index:
                raise DatabaseOrderError(
                    f"frame {frame_index} is not after frame {self._frames[-1].frame_index}"
                )
            self._frames.append(stored)
            self._by_index[frame_index] = stored
            for word in bow.entries:
                self._inverted.setdefault(word, []).append(frame_index)
        return stored

    # ============================================================
    # Reads
    # ============================================================

    def __len__(self) -> int:
        with self._lock:
            return len(self._frames)

    def __contains__(self, frame_index: int) -> bool:
        with self._lock:
            return frame_index in self._by_index

    def get(self, frame_index: int) -> Optional[StoredFrame]:
        with self._lock:
            return self._by_index.get(frame_index)

    @property
    def frame_indices(self) -> List[int]:
        with self._lock:
            return [f.frame_index for f in self._frames]

    @property
    def inverted_index(self) -> Dict[int, List[int]]:
        with self._lock:
            return {word: list(frames) for word, frames in self._inverted.items()}

    def frames_with_word(self, word: int) -> List[int]:
        with self._lock:
            return list(self._inverted.get(word, []))

    def rebuild_inverted_index(self) -> Dict[int, List[int]]:
        """Inverted index recomputed from the stored BowVectors."""
        with self._lock:
            frames = list(self._frames)
        rebuilt: Dict[int, List[int]] = {}
        for stored in frames:
            for word in stored.bow.entries:
                rebuilt.setdefault(word, []).append(stored.frame_index)
        return rebuilt

    # ============================================================
    # Retrieval
    # ============================================================

    def query(
        self,
        v_q: BowVector,
        alpha: float,
        n_candidates: int,
        acquisition_rate: int,
        beta: float,
        min_group_size: int = 1,
        use_index: bool = True,
    ) -> Optional[CandidateMatch]:
        """
        Best view of the best temporal group, or None.

        With `use_index` the frames scored are those sharing a word with the
        query; otherwise every stored frame is scored.
        """
        if len(v_q) == 0:
            return None

        with self._lock:
            if use_index:
                hit = set()
                for word in v_q.entries:
                    hit.update(self._inverted.get(word, ()))
                frames = [self._by_index[i] for i in sorted(hit)]
            else:
                frames = list(self._frames)

        scored = [(f.frame_index, score(v_q, f.bow)) for f in frames]
        return select_candidate(
            scored,
            alpha=alpha,
            cap=n_candidates * acquisition_rate,
            span=beta * acquisition_rate,
            min_group_size=min_group_size,
        )


# ============================================================
# Candidate selection
# ============================================================

def group_candidates(
    scored: Iterable[Tuple[int, float]], span: float
) -> List[List[Tuple[int, float]]]:
    """Split frames (sorted by index) into groups no wider than `span` frames."""
    groups: List[List[Tuple[int, float]]] = []
    for frame, value in sorted(scored):
        if groups and frame - groups[-1][0][0] <= span:
            groups[-1].append((frame, value))
        else:
            groups.append([(frame, value)])
    return groups


def select_candidate(
    scored: Iterable[Tuple[int, float]],
    alpha: float,
    cap: int,
    span: float,
    min_group_size: int = 1,
) -> Optional[CandidateMatch]:
    # 1. threshold, then keep the `cap` best (ties to the earlier frame)
    kept = [(frame, value) for frame, value in scored if value > 0 and value >= alpha]
    kept.sort(key=lambda fv: (-fv[1], fv[0]))
    kept = kept[:cap]
    if not kept:
        return None

    # 2. temporal groups, size filter
    groups = [g for g in group_candidates(kept, span) if len(g) >= min_group_size]
    if not groups:
        return None

    # 3. best group by summed score, earliest on ties
    best_group, best_sum = None, -1.0
    for group in groups:
        total = sum(value for _, value in group)
        if total > best_sum:
            best_group, best_sum = group, total

    # 4. best view inside it, lowest frame on ties
    frame, value = min(best_group, key=lambda fv: (-fv[1], fv[0]))
    return CandidateMatch(
        matched_frame=frame,
        score=value,
        group_range=(best_group[0][0], best_group[-1][0]),
    )
