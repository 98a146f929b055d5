"""
Overlap — Binary Vocabulary Tree.
Hierarchical k-majority clustering of 256-bit descriptors, bag-of-words
transform and view-feature scoring.

Workflow:
1. `build_vocabulary` clusters a training corpus offline (k-means++ seeding,
   bitwise-majority centroids) into a tree of depth at most `depth`
2. `Vocabulary.transform` routes each descriptor of a frame down the tree and
   returns the L1-normalised tf-idf BowVector plus the direct index
3. `score` compares two BowVectors: 1 - 0.5 * |a/|a| - b/|b||_1
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from overlap.core.config import DESCRIPTOR_BYTES
from overlap.core.errors import VocabularyError
from overlap.ml.features import POPCOUNT
from overlap.models.schemas import BowVector, FrameFeatures, as_descriptors

logger = logging.getLogger(__name__)

KMAJORITY_MAX_ITERS = 15
DESCENT_CHUNK = 16384


# ============================================================
# Clustering
# ============================================================

def _nearest(descriptors: np.ndarray, centers: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Index of and distance to the nearest center, ties to the lowest index."""
    best = np.empty(len(descriptors), dtype=np.int64)
    dist = np.empty(len(descriptors), dtype=np.int32)
    for start in range(0, len(descriptors), DESCENT_CHUNK):
        block = descriptors[start:start + DESCENT_CHUNK]
        d = POPCOUNT[np.bitwise_xor(block[:, None, :], centers[None, :, :])].sum(axis=2, dtype=np.int32)
        best[start:start + len(block)] = np.argmin(d, axis=1)
        dist[start:start + len(block)] = d[np.arange(len(block)), best[start:start + len(block)]]
    return best, dist


def _seed_centers(descriptors: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; stops early when every descriptor coincides with a seed."""
    chosen = [int(rng.integers(len(descriptors)))]
    _, dist = _nearest(descriptors, descriptors[chosen])
    while len(chosen) < k:
        weights = dist.astype(np.float64) ** 2
        total = weights.sum()
        if total == 0:
            break
        pick = int(rng.choice(len(descriptors), p=weights / total))
        chosen.append(pick)
        _, d_new = _nearest(descriptors, descriptors[[pick]])
        dist = np.minimum(dist, d_new)
    return descriptors[chosen].copy()


def majority_center(descriptors: np.ndarray) -> np.ndarray:
    """Bitwise majority vote; a tied bit resolves to 0."""
    ones = np.unpackbits(descriptors, axis=1).sum(axis=0, dtype=np.int64)
    return np.packbits((2 * ones > len(descriptors)).astype(np.uint8))


def k_majority(
    descriptors: np.ndarray, k: int, rng: np.random.Generator
) -> List[np.ndarray]:
    """
    Partition descriptors into at most k clusters.

    Returns the member indices of each non-empty cluster, ordered by seed.
    """
    centers = _seed_centers(descriptors, k, rng)
    assignment, _ = _nearest(descriptors, centers)
    for _ in range(KMAJORITY_MAX_ITERS):
        labels = np.unique(assignment)
        centers = np.stack([majority_center(descriptors[assignment == c]) for c in labels])
        updated, _ = _nearest(descriptors, centers)
        # relabel onto the compacted center list before comparing
        previous = np.searchsorted(labels, assignment)
        assignment = updated
        if np.array_equal(previous, updated):
            break
    return [np.flatnonzero(assignment == c) for c in np.unique(assignment)]


# ============================================================
# Vocabulary
# ============================================================

@dataclass(eq=False)
class Vocabulary:
    """
    Flat pre-order tree.

    Node 0 is the root (its center is unused). `parents[0] == -1`; every other
    parent precedes its child. Leaves carry word ids in pre-order and one idf
    weight each.
    """

    branching: int
    depth: int
    centers: np.ndarray   # (n_nodes, 32) uint8
    parents: np.ndarray   # (n_nodes,) int64
    is_leaf: np.ndarray   # (n_nodes,) bool
    idf: np.ndarray       # (n_words,) float64

    def __post_init__(self):
        self.centers = as_descriptors(self.centers)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.is_leaf = np.asarray(self.is_leaf, dtype=bool)
        self.idf = np.asarray(self.idf, dtype=np.float64)
        n_nodes = len(self.parents)

        if self.branching < 2 or self.depth < 1:
            raise VocabularyError("branching must be >= 2 and depth >= 1")
        if n_nodes < 2 or len(self.centers) != n_nodes or len(self.is_leaf) != n_nodes:
            raise VocabularyError("inconsistent node arrays")
        if self.parents[0] != -1 or self.is_leaf[0]:
            raise VocabularyError("node 0 must be an internal root")
        if np.any(self.parents[1:] < 0) or np.any(self.parents[1:] >= np.arange(1, n_nodes)):
            raise VocabularyError("nodes are not in pre-order")
        if np.any(self.is_leaf[self.parents[1:]]):
            raise VocabularyError("a leaf cannot have children")

        self.levels = np.zeros(n_nodes, dtype=np.int64)
        for node in range(1, n_nodes):
            self.levels[node] = self.levels[self.parents[node]] + 1
        if self.levels.max() > self.depth:
            raise VocabularyError("tree deeper than declared depth")

        counts = np.bincount(self.parents[1:], minlength=n_nodes)
        if np.any(counts[~self.is_leaf] < 1) or counts.max() > self.branching:
            raise VocabularyError("every internal node needs 1..k_b children")
        self.children = np.full((n_nodes, self.branching), -1, dtype=np.int64)
        filled = np.zeros(n_nodes, dtype=np.int64)
        for node in range(1, n_nodes):
            parent = self.parents[node]
            self.children[parent, filled[parent]] = node
            filled[parent] += 1

        self.leaf_nodes = np.flatnonzero(self.is_leaf)
        self.word_of_node = np.full(n_nodes, -1, dtype=np.int64)
        self.word_of_node[self.leaf_nodes] = np.arange(len(self.leaf_nodes))
        if len(self.idf) != len(self.leaf_nodes):
            raise VocabularyError(f"{len(self.leaf_nodes)} leaves but {len(self.idf)} idf weights")
        if not np.all(np.isfinite(self.idf)) or np.any(self.idf < 0):
            raise VocabularyError("idf weights must be finite and non-negative")

    @property
    def node_count(self) -> int:
        return len(self.parents)

    @property
    def n_words(self) -> int:
        return len(self.leaf_nodes)

    def leaf_centers(self) -> np.ndarray:
        return self.centers[self.leaf_nodes]

    # ============================================================
    # Descent
    # ============================================================

    def descend(self, descriptors: np.ndarray) -> np.ndarray:
        """
        Greedy descent of every descriptor.

        Returns an (n, depth + 1) table of node ids per level; -1 once the
        descriptor has reached its leaf.
        """
        descriptors = as_descriptors(descriptors)
        n = len(descriptors)
        path = np.full((n, self.depth + 1), -1, dtype=np.int64)
        path[:, 0] = 0
        current = np.zeros(n, dtype=np.int64)

        for level in range(self.depth):
            active = np.flatnonzero(~self.is_leaf[current])
            if len(active) == 0:
                break
            kids = self.children[current[active]]
            valid = kids >= 0
            for start in range(0, len(active), DESCENT_CHUNK):
                rows = slice(start, start + DESCENT_CHUNK)
                block_kids = kids[rows]
                centers = self.centers[np.where(valid[rows], block_kids, 0)]
                d = POPCOUNT[
                    np.bitwise_xor(descriptors[active[rows]][:, None, :], centers)
                ].sum(axis=2, dtype=np.int32)
                d[~valid[rows]] = np.iinfo(np.int32).max
                best = np.argmin(d, axis=1)
                current[active[rows]] = block_kids[np.arange(len(best)), best]
            path[active, level + 1] = current[active]
        return path

    def words(self, descriptors: np.ndarray) -> np.ndarray:
        """Word id reached by every descriptor."""
        path = self.descend(descriptors)
        if len(path) == 0:
            return np.zeros(0, dtype=np.int64)
        last = np.where(path >= 0, np.arange(path.shape[1]), 0).max(axis=1)
        return self.word_of_node[path[np.arange(len(path)), last]]

    def transform(
        self, features: FrameFeatures, direct_index_level: int = 2
    ) -> Tuple[BowVector, Dict[int, List[int]]]:
        """BowVector (tf-idf, L1-normalised) and direct index of one frame."""
        if len(features) == 0:
            return BowVector(), {}

        path = self.descend(features.descriptors)
        rows = np.arange(len(path))
        last = np.where(path >= 0, np.arange(path.shape[1]), 0).max(axis=1)
        words = self.word_of_node[path[rows, last]]

        # 1. tf-idf with raw term counts, zero weights dropped
        ids, tf = np.unique(words, return_counts=True)
        weights = tf * self.idf[ids]
        keep = weights > 0
        bow = BowVector(
            {int(w): float(v) for w, v in zip(ids[keep], weights[keep])}
        ).normalized()

        # 2. direct index at the requested level (leaf when the branch is shorter)
        level = np.minimum(last, direct_index_level)
        nodes = path[rows, level]
        direct: Dict[int, List[int]] = {}
        for feature, node in enumerate(nodes.tolist()):
            direct.setdefault(node, []).append(feature)
        return bow, direct


# ============================================================
# Training
# ============================================================

def build_vocabulary(
    training_descriptors: np.ndarray, k_b: int = 10, depth: int = 6, seed: int = 0
) -> Vocabulary:
    """Train a vocabulary tree by recursive k-majority clustering."""
    descriptors = as_descriptors(training_descriptors)
    if len(descriptors) == 0:
        raise VocabularyError("training set is empty")
    if k_b < 2:
        raise VocabularyError(f"k_b must be >= 2; got {k_b}")
    if depth < 1:
        raise VocabularyError(f"depth must be >= 1; got {depth}")
    if k_b > 255 or depth > 255:
        raise VocabularyError(f"k_b and depth must fit one byte; got k_b={k_b}, depth={depth}")
    if len(descriptors) < k_b:
        raise VocabularyError(f"need at least k_b={k_b} training descriptors; got {len(descriptors)}")

    rng = np.random.default_rng(seed)
    centers = [np.zeros(DESCRIPTOR_BYTES, dtype=np.uint8)]
    parents = [-1]
    leaves = [False]

    def grow(node: int, members: np.ndarray, level: int) -> None:
        clusters = k_majority(descriptors[members], k_b, rng)
        only_child = len(clusters) == 1
        for cluster in clusters:
            child_members = members[cluster]
            child = len(parents)
            centers.append(majority_center(descriptors[child_members]))
            parents.append(node)
            is_leaf = level + 1 == depth or len(child_members) < k_b or only_child
            leaves.append(is_leaf)
            if not is_leaf:
                grow(child, child_members, level + 1)

    grow(0, np.arange(len(descriptors)), 0)

    vocab = Vocabulary(
        branching=k_b,
        depth=depth,
        centers=np.stack(centers),
        parents=np.array(parents),
        is_leaf=np.array(leaves),
        idf=np.zeros(int(np.sum(leaves))),
    )

    # idf from the descriptors that actually reach each leaf
    hits = np.bincount(vocab.words(descriptors), minlength=vocab.n_words)
    vocab.idf = np.log(len(descriptors) / np.maximum(hits, 1))
    logger.info(
        "vocabulary built: %d descriptors, %d nodes, %d words (k_b=%d, depth=%d)",
        len(descriptors), vocab.node_count, vocab.n_words, k_b, depth,
    )
    return vocab


# ============================================================
# Scoring
# ============================================================

def score(v_q: BowVector, v_k: BowVector) -> float:
    """View-feature similarity in [0, 1]; 0 when either vector is empty."""
    if len(v_q) == 0 or len(v_k) == 0:
        return 0.0
    if not v_q.entries.keys() & v_k.entries.keys():
        return 0.0
    a = v_q.normalized().entries
    b = v_k.normalized().entries
    distance = 0.0
    for word in sorted(a.keys() | b.keys()):
        distance += abs(a.get(word, 0.0) - b.get(word, 0.0))
    return min(1.0, max(0.0, 1.0 - 0.5 * distance))
