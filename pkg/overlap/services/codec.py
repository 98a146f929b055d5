"""
Overlap — Binary Codecs.
Wire frames of the peer protocol and the on-disk formats.

All integers are little-endian.

Wire frame (16-byte header + payload):
    magic "XVQP" | version u16 | msg_type u8 | camera_id u8 | frame_index u32 | payload_len u32
QUERY payload: one frame-features block
    frame_index u32 | F_t u16 | F_t x (x f32, y f32, descriptor 32 bytes)
REPLY payload:
    status u8 | matched_frame u32 (0xFFFFFFFF when absent) | inlier_count u16

Files:
    XVFF  frame-features sequence   magic | version u16 | frame_count u32 | blocks
    XVGT  ground-truth side table   magic | version u16 | frame_count u32 |
                                    per frame: frame_index u32, count u16, point ids u32
    XVVC  vocabulary                magic | version u16 | k_b u8 | depth u8 | node_count u32 |
                                    pre-order (parent u32, is_leaf u8, center 32 bytes, [idf f64])
"""

import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from overlap.core.config import (
    DESCRIPTOR_BYTES,
    FEATURE_RECORD_BYTES,
    FILE_FORMAT_VERSION,
    FRAME_FEATURES_MAGIC,
    GROUND_TRUTH_MAGIC,
    NO_FRAME,
    VOCABULARY_MAGIC,
    WIRE_MAGIC,
    WIRE_VERSION,
)
from overlap.core.errors import FormatError, ProtocolError, VocabularyError
from overlap.ml.vocabulary import Vocabulary
from overlap.models.schemas import (
    MESSAGE_TYPE_CODES,
    REPLY_STATUS_CODES,
    FrameFeatures,
    MessageType,
    QueryMessage,
    ReplyMessage,
    WireMessage,
)

HEADER = struct.Struct("<4sHBBII")
BLOCK_HEADER = struct.Struct("<IH")
REPLY_BODY = struct.Struct("<BIH")
FILE_HEADER = struct.Struct("<4sHI")
VOCAB_HEADER = struct.Struct("<4sHBBI")
VOCAB_NODE = struct.Struct(f"<IB{DESCRIPTOR_BYTES}s")
IDF = struct.Struct("<d")

RECORD_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("d", "u1", (DESCRIPTOR_BYTES,))])
assert RECORD_DTYPE.itemsize == FEATURE_RECORD_BYTES

_TYPE_BY_CODE = {code: kind for kind, code in MESSAGE_TYPE_CODES.items()}
_STATUS_BY_CODE = {code: status for status, code in REPLY_STATUS_CODES.items()}

PathLike = Union[str, Path]


def feature_payload_bytes(n_features: int) -> int:
    """Bytes spent on the features themselves (40 per feature)."""
    return FEATURE_RECORD_BYTES * n_features


def query_bandwidth_kbps(max_features: int, sharing_rate: int) -> float:
    """Feature payload rate in kB/s (1 kB = 1000 bytes) at `sharing_rate` queries per second."""
    return feature_payload_bytes(max_features) * sharing_rate / 1000.0


# ============================================================
# Frame-features blocks
# ============================================================

def encode_block(features: FrameFeatures) -> bytes:
    if len(features) > 0xFFFF:
        raise FormatError(f"too many features for one block: {len(features)}")
    records = np.zeros(len(features), dtype=RECORD_DTYPE)
    records["x"] = features.points[:, 0]
    records["y"] = features.points[:, 1]
    records["d"] = features.descriptors
    return BLOCK_HEADER.pack(features.frame_index, len(features)) + records.tobytes()


def decode_block(
    data: bytes, offset: int = 0, max_features: Optional[int] = None, error=FormatError
) -> Tuple[FrameFeatures, int]:
    """Decode one block at `offset`; returns the features and the next offset."""
    if len(data) - offset < BLOCK_HEADER.size:
        raise error("truncated frame-features block header")
    frame_index, count = BLOCK_HEADER.unpack_from(data, offset)
    offset += BLOCK_HEADER.size
    if max_features is not None and count > max_features:
        raise error(f"frame {frame_index} carries {count} features; maximum is {max_features}")
    size = count * FEATURE_RECORD_BYTES
    if len(data) - offset < size:
        raise error(f"frame {frame_index}: truncated feature records")
    if count:
        records = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=offset)
        points = np.stack([records["x"], records["y"]], axis=1)
        descriptors = records["d"].copy()
    else:
        points, descriptors = np.zeros((0, 2)), np.zeros((0, DESCRIPTOR_BYTES))
    try:
        features = FrameFeatures(frame_index, points, descriptors)
    except ValueError as exc:
        raise error(f"frame {frame_index}: {exc}") from exc
    return features, offset + size


# ============================================================
# Wire frames
# ============================================================

def _frame(msg_type: MessageType, camera_id: int, frame_index: int, payload: bytes = b"") -> bytes:
    header = HEADER.pack(
        WIRE_MAGIC, WIRE_VERSION, MESSAGE_TYPE_CODES[msg_type], camera_id, frame_index, len(payload)
    )
    return header + payload


def encode_query(msg: QueryMessage) -> bytes:
    if msg.features.frame_index != msg.frame_index:
        raise ProtocolError("query frame_index differs from its features' frame_index")
    return _frame(MessageType.QUERY, msg.camera_id, msg.frame_index, encode_block(msg.features))


def encode_reply(camera_id: int, frame_index: int, reply: ReplyMessage) -> bytes:
    matched = NO_FRAME if reply.matched_frame is None else reply.matched_frame
    body = REPLY_BODY.pack(REPLY_STATUS_CODES[reply.status], matched, reply.inlier_count)
    return _frame(MessageType.REPLY, camera_id, frame_index, body)


def encode_heartbeat(camera_id: int, frame_index: int) -> bytes:
    return _frame(MessageType.HEARTBEAT, camera_id, frame_index)


def encode_fin(camera_id: int, frame_index: int) -> bytes:
    return _frame(MessageType.FIN, camera_id, frame_index)


def decode_header(data: bytes) -> Tuple[MessageType, int, int, int]:
    """Validate a 16-byte header; returns (type, camera_id, frame_index, payload_len)."""
    if len(data) < HEADER.size:
        raise ProtocolError(f"truncated header: {len(data)} of {HEADER.size} bytes")
    magic, version, code, camera_id, frame_index, payload_len = HEADER.unpack_from(data)
    if magic != WIRE_MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise ProtocolError(f"version mismatch: got {version}, expected {WIRE_VERSION}")
    if code not in _TYPE_BY_CODE:
        raise ProtocolError(f"unknown message type {code}")
    return _TYPE_BY_CODE[code], camera_id, frame_index, payload_len


def decode_message(data: bytes, max_features: Optional[int] = None) -> WireMessage:
    """Decode one complete wire frame."""
    msg_type, camera_id, frame_index, payload_len = decode_header(data)
    payload = data[HEADER.size:]
    if len(payload) < payload_len:
        raise ProtocolError(f"truncated payload: {len(payload)} of {payload_len} bytes")
    if len(payload) > payload_len:
        raise ProtocolError(f"{len(payload) - payload_len} trailing bytes after payload")

    if msg_type == MessageType.QUERY:
        features, end = decode_block(payload, 0, max_features, error=ProtocolError)
        if end != payload_len:
            raise ProtocolError("payload length does not match the feature count")
        if features.frame_index != frame_index:
            raise ProtocolError("payload frame_index differs from header frame_index")
        return WireMessage(
            msg_type, camera_id, frame_index,
            query=QueryMessage(camera_id, frame_index, features),
        )

    if msg_type == MessageType.REPLY:
        if payload_len != REPLY_BODY.size:
            raise ProtocolError(f"reply payload must be {REPLY_BODY.size} bytes; got {payload_len}")
        code, matched, inliers = REPLY_BODY.unpack(payload)
        if code not in _STATUS_BY_CODE:
            raise ProtocolError(f"unknown reply status {code}")
        try:
            reply = ReplyMessage(
                _STATUS_BY_CODE[code], None if matched == NO_FRAME else matched, inliers
            )
        except ValueError as exc:
            raise ProtocolError(str(exc)) from exc
        return WireMessage(msg_type, camera_id, frame_index, reply=reply)

    if payload_len != 0:
        raise ProtocolError(f"{msg_type.value} frames carry no payload; got {payload_len} bytes")
    return WireMessage(msg_type, camera_id, frame_index)


def decode_query(data: bytes, max_features: Optional[int] = None) -> QueryMessage:
    message = decode_message(data, max_features)
    if message.msg_type != MessageType.QUERY:
        raise ProtocolError(f"expected QUERY, got {message.msg_type.value}")
    return message.query


def decode_reply(data: bytes) -> ReplyMessage:
    message = decode_message(data)
    if message.msg_type != MessageType.REPLY:
        raise ProtocolError(f"expected REPLY, got {message.msg_type.value}")
    return message.reply


# ============================================================
# XVFF sequence files
# ============================================================

def encode_sequence(frames: List[FrameFeatures]) -> bytes:
    chunks = [FILE_HEADER.pack(FRAME_FEATURES_MAGIC, FILE_FORMAT_VERSION, len(frames))]
    chunks.extend(encode_block(frame) for frame in frames)
    return b"".join(chunks)


def _check_file_header(data: bytes, magic: bytes, label: str) -> Tuple[int, int]:
    if len(data) < FILE_HEADER.size:
        raise FormatError(f"{label}: truncated header")
    found, version, count = FILE_HEADER.unpack_from(data)
    if found != magic:
        raise FormatError(f"{label}: bad magic {found!r}")
    if version != FILE_FORMAT_VERSION:
        raise FormatError(f"{label}: unsupported version {version}")
    return count, FILE_HEADER.size


def decode_sequence(data: bytes, max_features: Optional[int] = None) -> List[FrameFeatures]:
    count, offset = _check_file_header(data, FRAME_FEATURES_MAGIC, "frame-features file")
    frames = []
    for _ in range(count):
        features, offset = decode_block(data, offset, max_features)
        if frames and features.frame_index <= frames[-1].frame_index:
            raise FormatError(f"frame indices not increasing at {features.frame_index}")
        frames.append(features)
    if offset != len(data):
        raise FormatError("trailing bytes after the last frame")
    return frames


def save_sequence(path: PathLike, frames: List[FrameFeatures]) -> None:
    Path(path).write_bytes(encode_sequence(frames))


def load_sequence(path: PathLike, max_features: Optional[int] = None) -> List[FrameFeatures]:
    return decode_sequence(Path(path).read_bytes(), max_features)


# ============================================================
# XVGT ground-truth side tables
# ============================================================

def encode_ground_truth(point_ids: Dict[int, np.ndarray]) -> bytes:
    chunks = [FILE_HEADER.pack(GROUND_TRUTH_MAGIC, FILE_FORMAT_VERSION, len(point_ids))]
    for frame_index in sorted(point_ids):
        ids = np.asarray(point_ids[frame_index], dtype="<u4")
        chunks.append(BLOCK_HEADER.pack(frame_index, len(ids)))
        chunks.append(ids.tobytes())
    return b"".join(chunks)


def decode_ground_truth(data: bytes) -> Dict[int, np.ndarray]:
    count, offset = _check_file_header(data, GROUND_TRUTH_MAGIC, "ground-truth file")
    table: Dict[int, np.ndarray] = {}
    for _ in range(count):
        if len(data) - offset < BLOCK_HEADER.size:
            raise FormatError("ground-truth file: truncated frame header")
        frame_index, n = BLOCK_HEADER.unpack_from(data, offset)
        offset += BLOCK_HEADER.size
        if len(data) - offset < 4 * n:
            raise FormatError(f"ground-truth file: frame {frame_index} truncated")
        table[frame_index] = (
            np.frombuffer(data, dtype="<u4", count=n, offset=offset).astype(np.int64)
            if n else np.zeros(0, dtype=np.int64)
        )
        offset += 4 * n
    if offset != len(data):
        raise FormatError("ground-truth file: trailing bytes")
    return table


def save_ground_truth(path: PathLike, point_ids: Dict[int, np.ndarray]) -> None:
    Path(path).write_bytes(encode_ground_truth(point_ids))


def load_ground_truth(path: PathLike) -> Dict[int, np.ndarray]:
    return decode_ground_truth(Path(path).read_bytes())


# ============================================================
# XVVC vocabulary files
# ============================================================

def encode_vocabulary(vocab: Vocabulary) -> bytes:
    chunks = [
        VOCAB_HEADER.pack(
            VOCABULARY_MAGIC, FILE_FORMAT_VERSION, vocab.branching, vocab.depth, vocab.node_count
        )
    ]
    for node in range(vocab.node_count):
        parent = NO_FRAME if vocab.parents[node] < 0 else int(vocab.parents[node])
        leaf = bool(vocab.is_leaf[node])
        chunks.append(VOCAB_NODE.pack(parent, int(leaf), vocab.centers[node].tobytes()))
        if leaf:
            chunks.append(IDF.pack(float(vocab.idf[vocab.word_of_node[node]])))
    return b"".join(chunks)


def decode_vocabulary(data: bytes) -> Vocabulary:
    if len(data) < VOCAB_HEADER.size:
        raise FormatError("vocabulary file: truncated header")
    magic, version, branching, depth, node_count = VOCAB_HEADER.unpack_from(data)
    if magic != VOCABULARY_MAGIC:
        raise FormatError(f"vocabulary file: bad magic {magic!r}")
    if version != FILE_FORMAT_VERSION:
        raise FormatError(f"vocabulary file: unsupported version {version}")

    offset = VOCAB_HEADER.size
    centers, parents, leaves, idf = [], [], [], []
    for node in range(node_count):
        if len(data) - offset < VOCAB_NODE.size:
            raise FormatError(f"vocabulary file: node {node} truncated")
        parent, leaf, center = VOCAB_NODE.unpack_from(data, offset)
        offset += VOCAB_NODE.size
        parents.append(-1 if parent == NO_FRAME else parent)
        leaves.append(bool(leaf))
        centers.append(np.frombuffer(center, dtype=np.uint8))
        if leaf:
            if len(data) - offset < IDF.size:
                raise FormatError(f"vocabulary file: idf of node {node} truncated")
            idf.append(IDF.unpack_from(data, offset)[0])
            offset += IDF.size
    if offset != len(data):
        raise FormatError("vocabulary file: trailing bytes")
    if node_count == 0:
        raise FormatError("vocabulary file: no nodes")

    try:
        return Vocabulary(
            branching=branching,
            depth=depth,
            centers=np.stack(centers),
            parents=np.array(parents),
            is_leaf=np.array(leaves),
            idf=np.array(idf),
        )
    except VocabularyError as exc:
        raise FormatError(f"vocabulary file: {exc}") from exc


def save_vocabulary(path: PathLike, vocab: Vocabulary) -> None:
    Path(path).write_bytes(encode_vocabulary(vocab))


def load_vocabulary(path: PathLike) -> Vocabulary:
    return decode_vocabulary(Path(path).read_bytes())
