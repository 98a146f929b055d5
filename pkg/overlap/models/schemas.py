"""
Overlap — Domain models.
Dataclasses for every record that crosses a module boundary, the wire or a file.

Arrays are numpy: descriptors are (n, 32) uint8 rows (256 bits each, most
significant bit first), interest points are (n, 2) float32 pixel coordinates.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from overlap.core.config import DESCRIPTOR_BYTES


# ============================================================
# ENUMS
# ============================================================

class ReplyStatus(str, Enum):
    MATCH = "MATCH"
    NO_MATCH = "NO_MATCH"
    INITIALISING = "INITIALISING"


class MessageType(str, Enum):
    QUERY = "QUERY"
    REPLY = "REPLY"
    HEARTBEAT = "HEARTBEAT"
    FIN = "FIN"


class Outcome(str, Enum):
    TP = "TP"
    FP = "FP"
    FN = "FN"
    TN = "TN"


# Wire codes (u8) for the enums above
MESSAGE_TYPE_CODES = {
    MessageType.QUERY: 0,
    MessageType.REPLY: 1,
    MessageType.HEARTBEAT: 2,
    MessageType.FIN: 3,
}
REPLY_STATUS_CODES = {
    ReplyStatus.MATCH: 0,
    ReplyStatus.NO_MATCH: 1,
    ReplyStatus.INITIALISING: 2,
}


# ============================================================
# FEATURES
# ============================================================

def as_descriptors(values) -> np.ndarray:
    """Coerce to a contiguous (n, 32) uint8 descriptor array."""
    array = np.ascontiguousarray(values, dtype=np.uint8)
    if array.ndim == 1 and array.size == DESCRIPTOR_BYTES:
        array = array.reshape(1, DESCRIPTOR_BYTES)
    if array.size == 0:
        return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    if array.ndim != 2 or array.shape[1] != DESCRIPTOR_BYTES:
        raise ValueError(f"descriptors must have shape (n, {DESCRIPTOR_BYTES}); got {array.shape}")
    return array


@dataclass(eq=False)
class FrameFeatures:
    """Interest points + binary descriptors of one frame (the shared query set)."""

    frame_index: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.float32))
    descriptors: np.ndarray = field(
        default_factory=lambda: np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    )

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be non-negative; got {self.frame_index}")
        points = np.ascontiguousarray(self.points, dtype=np.float32)
        if points.size == 0:
            points = np.zeros((0, 2), dtype=np.float32)
        if points.ndim != 2 or points.shape[1] != 2:
            raise ValueError(f"points must have shape (n, 2); got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValueError("interest point coordinates must be finite")
        self.points = points
        self.descriptors = as_descriptors(self.descriptors)
        if len(self.points) != len(self.descriptors):
            raise ValueError(
                f"{len(self.points)} points but {len(self.descriptors)} descriptors"
            )

    def __len__(self) -> int:
        return len(self.descriptors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FrameFeatures):
            return NotImplemented
        return (
            self.frame_index == other.frame_index
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.descriptors, other.descriptors)
        )


@dataclass(frozen=True)
class MatchPair:
    query_index: int
    candidate_index: int
    distance: int


@dataclass
class MatchSet:
    """One-to-one local-feature matches between a query and a candidate frame."""

    pairs: List[MatchPair] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([p.query_index for p in self.pairs], dtype=np.int64)

    @property
    def candidate_indices(self) -> np.ndarray:
        return np.array([p.candidate_index for p in self.pairs], dtype=np.int64)

    def subset(self, mask) -> "MatchSet":
        return MatchSet([p for p, keep in zip(self.pairs, mask) if keep])


# ============================================================
# VIEW FEATURES
# ============================================================

@dataclass
class BowVector:
    """Sparse bag-of-binary-words vector: word_id -> positive weight."""

    entries: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for word, weight in self.entries.items():
            if not weight > 0:
                raise ValueError(f"word {word} has non-positive weight {weight}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def l1_norm(self) -> float:
        return float(sum(self.entries.values()))

    def normalized(self) -> "BowVector":
        norm = self.l1_norm
        if norm == 0:
            return BowVector()
        return BowVector({w: v / norm for w, v in self.entries.items()})

    def scaled(self, factor: float) -> "BowVector":
        return BowVector({w: v * factor for w, v in self.entries.items()})


@dataclass(frozen=True)
class CandidateMatch:
    matched_frame: int
    score: float
    group_range: Tuple[int, int]


@dataclass
class StoredFrame:
    """One ingested frame of a camera's view database."""

    frame_index: int
    bow: BowVector
    features: FrameFeatures
    direct_index: Dict[int, List[int]] = field(default_factory=dict)


# ============================================================
# GEOMETRY
# ============================================================

@dataclass(eq=False)
class FundamentalMatrix:
    """Rank-2 3x3 matrix with x_b^T F x_a = 0, unit Frobenius norm, largest entry positive."""

    m: np.ndarray

    def __post_init__(self):
        self.m = canonicalize_fundamental(np.asarray(self.m, dtype=np.float64))

    def allclose(self, other: "FundamentalMatrix", atol: float = 1e-6) -> bool:
        return bool(np.allclose(self.m, other.m, atol=atol))


def canonicalize_fundamental(m: np.ndarray) -> np.ndarray:
    if m.shape != (3, 3):
        raise ValueError(f"fundamental matrix must be 3x3; got {m.shape}")
    norm = np.linalg.norm(m)
    if norm == 0 or not np.isfinite(norm):
        raise ValueError("fundamental matrix must be finite and non-zero")
    m = m / norm
    flat = m.ravel()
    if flat[np.argmax(np.abs(flat))] < 0:
        m = -m
    return m


@dataclass
class ValidationResult:
    accepted: bool
    inliers: MatchSet = field(default_factory=MatchSet)
    fundamental: Optional[FundamentalMatrix] = None
    iterations_run: int = 0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(eq=False)
class CameraPose:
    """World-to-camera transform: x_cam = R @ x_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must have det +1")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction in world coordinates."""
        return self.rotation[2].copy()

    def to_camera(self, points_world: np.ndarray) -> np.ndarray:
        return np.asarray(points_world, dtype=np.float64) @ self.rotation.T + self.translation

    def to_world(self, points_camera: np.ndarray) -> np.ndarray:
        return (np.asarray(points_camera, dtype=np.float64) - self.translation) @ self.rotation


# ============================================================
# PROTOCOL
# ============================================================

@dataclass(eq=False)
class QueryMessage:
    camera_id: int
    frame_index: int
    features: FrameFeatures

    def __eq__(self, other) -> bool:
        if not isinstance(other, QueryMessage):
            return NotImplemented
        return (
            self.camera_id == other.camera_id
            and self.frame_index == other.frame_index
            and self.features == other.features
        )


@dataclass(frozen=True)
class ReplyMessage:
    status: ReplyStatus
    matched_frame: Optional[int] = None
    inlier_count: int = 0

    def __post_init__(self):
        if (self.status == ReplyStatus.MATCH) != (self.matched_frame is not None):
            raise ValueError("matched_frame is present iff status is MATCH")
        if not 0 <= self.inlier_count <= 0xFFFF:
            raise ValueError(f"inlier_count out of range: {self.inlier_count}")


@dataclass
class WireMessage:
    """One decoded wire frame."""

    msg_type: MessageType
    camera_id: int
    frame_index: int
    query: Optional[QueryMessage] = None
    reply: Optional[ReplyMessage] = None


@dataclass
class RoundRecord:
    """One lockstep round as seen by the sending camera."""

    round_index: int
    frame_index: int
    shared: bool
    reply: Optional[ReplyMessage]


@dataclass
class ServedRecord:
    """One request answered on behalf of the partner camera."""

    partner_frame: int
    was_query: bool
    reply: ReplyMessage


@dataclass
class RecognitionLog:
    camera_id: int
    rounds: List[RoundRecord] = field(default_factory=list)
    served: List[ServedRecord] = field(default_factory=list)
    bytes_sent: int = 0
    complete: bool = False

    @property
    def queries(self) -> List[RoundRecord]:
        return [r for r in self.rounds if r.shared]


# ============================================================
# ANNOTATION & EVALUATION
# ============================================================

@dataclass(frozen=True)
class OverlapAnnotation:
    frame_a: int
    frame_b: int
    frusta_intersect: bool
    angular_distance: float
    euclidean_distance: float
    overlap_ratio: float
    valid: bool


@dataclass
class OutcomeCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("outcome counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def add(self, outcome: Outcome) -> None:
        attr = outcome.value.lower()
        setattr(self, attr, getattr(self, attr) + 1)

    def __add__(self, other: "OutcomeCounts") -> "OutcomeCounts":
        return OutcomeCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass(frozen=True)
class PairMetrics:
    """Precision, recall and accuracy as fractions in [0, 1]."""

    precision: float
    recall: float
    accuracy: float

    def as_percentages(self) -> Dict[str, float]:
        return {
            "P": round(self.precision * 100, 2),
            "R": round(self.recall * 100, 2),
            "A": round(self.accuracy * 100, 2),
        }
