"""
Overlap — Local-feature core.
Binary descriptor arithmetic and nearest-neighbour matching.

A query feature i is matched to its nearest candidate feature j when
    H(d_i, d_j) < gamma   and   H(d_i, d_j) / H(d_i, d_l) < delta
where l is the second-nearest candidate (l != j). Surviving pairs are made
one-to-one by keeping the lowest-distance pair per candidate feature.
"""

from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from overlap.core.config import DESCRIPTOR_BYTES
from overlap.models.schemas import FrameFeatures, MatchPair, MatchSet, as_descriptors

# Bits set in every byte value
POPCOUNT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1).astype(np.uint16)

# Above any Hamming distance between 256-bit descriptors
UNMEASURED = 2 * DESCRIPTOR_BYTES * 8


def _as_row(descriptor) -> np.ndarray:
    if isinstance(descriptor, (bytes, bytearray)):
        descriptor = np.frombuffer(bytes(descriptor), dtype=np.uint8)
    row = np.asarray(descriptor, dtype=np.uint8).ravel()
    if row.size != DESCRIPTOR_BYTES:
        raise ValueError(f"descriptor must be {DESCRIPTOR_BYTES} bytes; got {row.size}")
    return row


def hamming_distance(a, b) -> int:
    """Number of differing bits between two 256-bit descriptors."""
    return int(POPCOUNT[np.bitwise_xor(_as_row(a), _as_row(b))].sum())


def hamming_matrix(query: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    """(n, m) Hamming distances between two descriptor arrays."""
    query = as_descriptors(query)
    candidate = as_descriptors(candidate)
    if len(query) == 0 or len(candidate) == 0:
        return np.zeros((len(query), len(candidate)), dtype=np.int32)
    xor = np.bitwise_xor(query[:, None, :], candidate[None, :, :])
    return POPCOUNT[xor].sum(axis=2, dtype=np.int32)


def descriptor_from_bits(bits: Iterable[int]) -> np.ndarray:
    """Build a descriptor with the given bit positions set (bit 0 = MSB of byte 0)."""
    flags = np.zeros(DESCRIPTOR_BYTES * 8, dtype=np.uint8)
    flags[list(bits)] = 1
    return np.packbits(flags)


# ============================================================
# Matching
# ============================================================

def _ratio_candidates(
    distances: np.ndarray, gamma: int, delta: float
) -> List[MatchPair]:
    """Pairs passing both Hamming and ratio tests, before one-to-one resolution."""
    n_query, n_candidate = distances.shape
    if n_query == 0 or n_candidate < 2:
        return []

    nearest = np.argmin(distances, axis=1)
    rows = np.arange(n_query)
    d1 = distances[rows, nearest]
    second = distances.copy()
    second[rows, nearest] = np.iinfo(np.int32).max
    d2 = second.min(axis=1)

    kept = []
    for i in range(n_query):
        first, runner_up = int(d1[i]), int(d2[i])
        if first >= gamma:
            continue
        # both zero means two identical candidates: ambiguous, ratio 1
        ratio = first / runner_up if runner_up > 0 else 1.0
        if ratio < delta:
            kept.append(MatchPair(i, int(nearest[i]), first))
    return kept


def _one_to_one(pairs: List[MatchPair]) -> MatchSet:
    """Greedy resolution: lowest distance wins a candidate, ties to the lowest query index."""
    taken_query, taken_candidate = set(), set()
    accepted = []
    for pair in sorted(pairs, key=lambda p: (p.distance, p.query_index)):
        if pair.query_index in taken_query or pair.candidate_index in taken_candidate:
            continue
        taken_query.add(pair.query_index)
        taken_candidate.add(pair.candidate_index)
        accepted.append(pair)
    accepted.sort(key=lambda p: p.query_index)
    return MatchSet(accepted)


def match_local_features(
    query: FrameFeatures,
    candidate: FrameFeatures,
    gamma: int = 50,
    delta: float = 0.6,
) -> MatchSet:
    """Exhaustive nearest-neighbour matching with Hamming and ratio tests."""
    if not 0 < gamma <= 256:
        raise ValueError(f"gamma must be in (0, 256]; got {gamma}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1); got {delta}")
    distances = hamming_matrix(query.descriptors, candidate.descriptors)
    return _one_to_one(_ratio_candidates(distances, gamma, delta))


def _owner(index: Dict[int, List[int]], n: int) -> np.ndarray:
    """Node id of each feature, -1 when the index does not list it."""
    owner = np.full(n, -1, dtype=np.int64)
    for node, members in index.items():
        owner[np.asarray(members, dtype=np.int64)] = node
    return owner


def match_with_direct_index(
    query: FrameFeatures,
    query_index: Dict[int, List[int]],
    candidate: FrameFeatures,
    candidate_index: Dict[int, List[int]],
    gamma: int = 50,
    delta: float = 0.6,
    centers: Optional[np.ndarray] = None,
) -> MatchSet:
    """
    Direct-index matching; returns exactly `match_local_features`.

    Pairs routed through the same vocabulary node are measured first and
    bound each query feature's second-nearest distance. Any other pair is
    measured only when the triangle inequality through the candidate's node
    center (`centers[node]`) cannot place it beyond that bound. Without
    `centers` every remaining pair is measured.
    """
    if not 0 < gamma <= 256:
        raise ValueError(f"gamma must be in (0, 256]; got {gamma}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1); got {delta}")
    n_query, n_candidate = len(query), len(candidate)
    if n_query == 0 or n_candidate < 2:
        return MatchSet()

    # 1. pairs sharing a node
    distances = np.full((n_query, n_candidate), UNMEASURED, dtype=np.int32)
    measured = np.zeros((n_query, n_candidate), dtype=bool)
    for node in sorted(set(query_index) & set(candidate_index)):
        q_ids = np.asarray(query_index[node], dtype=np.int64)
        c_ids = np.asarray(candidate_index[node], dtype=np.int64)
        block = np.ix_(q_ids, c_ids)
        distances[block] = hamming_matrix(query.descriptors[q_ids], candidate.descriptors[c_ids])
        measured[block] = True

    # 2. second-nearest bound; UNMEASURED when fewer than two seeds
    bound = np.sort(distances, axis=1)[:, 1]

    # 3. lower bound |H(q, c_node) - H(c, c_node)| <= H(q, c)
    owner = _owner(candidate_index, n_candidate)
    lower = np.zeros((n_query, n_candidate), dtype=np.int32)
    listed = owner >= 0
    if centers is not None and listed.any():
        nodes = np.unique(owner[listed])
        to_center = hamming_matrix(query.descriptors, centers[nodes])
        columns = np.searchsorted(nodes, owner[listed])
        own = POPCOUNT[
            np.bitwise_xor(candidate.descriptors[listed], as_descriptors(centers[owner[listed]]))
        ].sum(axis=1, dtype=np.int32)
        lower[:, listed] = np.abs(to_center[:, columns] - own[None, :])

    # 4. everything that could still be nearest or second-nearest
    rows, cols = np.nonzero(~measured & (lower <= bound[:, None]))
    if rows.size:
        xor = np.bitwise_xor(query.descriptors[rows], candidate.descriptors[cols])
        distances[rows, cols] = POPCOUNT[xor].sum(axis=1, dtype=np.int32)
    return _one_to_one(_ratio_candidates(distances, gamma, delta))


def matched_points(
    matches: MatchSet, query: FrameFeatures, candidate: FrameFeatures
) -> Tuple[np.ndarray, np.ndarray]:
    """Coordinates of matched pairs as two float64 (n, 2) arrays."""
    if len(matches) == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    pts_q = query.points[matches.query_indices].astype(np.float64)
    pts_c = candidate.points[matches.candidate_indices].astype(np.float64)
    return pts_q, pts_c
