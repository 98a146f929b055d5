"""Wire frames and on-disk formats."""

import struct

import numpy as np
import pytest

from overlap.core.errors import FormatError, ProtocolError
from overlap.ml.vocabulary import build_vocabulary
from overlap.models.schemas import (
    FrameFeatures,
    MessageType,
    QueryMessage,
    ReplyMessage,
    ReplyStatus,
    WireMessage,
)
from overlap.services.codec import (
    HEADER,
    decode_message,
    decode_query,
    decode_reply,
    encode_fin,
    encode_heartbeat,
    encode_query,
    encode_reply,
    encode_vocabulary,
    feature_payload_bytes,
    load_ground_truth,
    load_sequence,
    load_vocabulary,
    query_bandwidth_kbps,
    save_ground_truth,
    save_sequence,
    save_vocabulary,
)
from tests.conftest import random_descriptors, random_features


def test_payload_size_and_bandwidth():
    assert feature_payload_bytes(1000) == 40_000
    assert query_bandwidth_kbps(1000, 6) == pytest.approx(240.0)


def test_query_frame_layout(rng):
    features = random_features(rng, 3, frame_index=42)
    data = encode_query(QueryMessage(2, 42, features))
    assert len(data) == HEADER.size + 6 + 3 * 40
    magic, version, code, camera_id, frame_index, payload_len = HEADER.unpack_from(data)
    assert (magic, version, code, camera_id, frame_index) == (b"XVQP", 1, 0, 2, 42)
    assert payload_len == 6 + 120
    assert decode_query(data) == QueryMessage(2, 42, features)


def test_empty_query_frame():
    data = encode_query(QueryMessage(1, 0, FrameFeatures(0)))
    query = decode_query(data)
    assert len(query.features) == 0


def test_reply_without_match_uses_sentinel():
    data = encode_reply(1, 7, ReplyMessage(ReplyStatus.NO_MATCH))
    status, matched, inliers = struct.unpack_from("<BIH", data, HEADER.size)
    assert (status, matched, inliers) == (1, 0xFFFFFFFF, 0)
    assert decode_reply(data) == ReplyMessage(ReplyStatus.NO_MATCH)


def test_match_reply():
    reply = ReplyMessage(ReplyStatus.MATCH, matched_frame=123, inlier_count=57)
    assert decode_reply(encode_reply(2, 130, reply)) == reply


def test_arbitrary_messages_decode_to_themselves(rng):
    for trial in range(60):
        camera_id = int(rng.integers(1, 3))
        frame_index = int(rng.integers(0, 2**31))
        kind = trial % 6
        if kind == 0:
            n = int(rng.integers(0, 1001))
            points = rng.uniform(-1e4, 1e4, size=(n, 2))
            features = FrameFeatures(frame_index, points, random_descriptors(rng, n))
            data = encode_query(QueryMessage(camera_id, frame_index, features))
            expected = WireMessage(
                MessageType.QUERY, camera_id, frame_index,
                query=QueryMessage(camera_id, frame_index, features),
            )
        elif kind == 1:
            reply = ReplyMessage(ReplyStatus.MATCH, int(rng.integers(0, 2**31)), int(rng.integers(0, 0x10000)))
            data = encode_reply(camera_id, frame_index, reply)
            expected = WireMessage(MessageType.REPLY, camera_id, frame_index, reply=reply)
        elif kind in (2, 3):
            reply = ReplyMessage(ReplyStatus.NO_MATCH if kind == 2 else ReplyStatus.INITIALISING)
            data = encode_reply(camera_id, frame_index, reply)
            expected = WireMessage(MessageType.REPLY, camera_id, frame_index, reply=reply)
        elif kind == 4:
            data = encode_heartbeat(camera_id, frame_index)
            expected = WireMessage(MessageType.HEARTBEAT, camera_id, frame_index)
        else:
            data = encode_fin(camera_id, frame_index)
            expected = WireMessage(MessageType.FIN, camera_id, frame_index)
        assert decode_message(data, max_features=1000) == expected


def test_control_frames():
    assert decode_message(encode_heartbeat(1, 5)).msg_type == MessageType.HEARTBEAT
    fin = decode_message(encode_fin(2, 299))
    assert (fin.msg_type, fin.camera_id, fin.frame_index) == (MessageType.FIN, 2, 299)


def test_bad_magic_and_version(rng):
    data = bytearray(encode_query(QueryMessage(1, 0, random_features(rng, 2))))
    bad_magic = b"XXXX" + bytes(data[4:])
    with pytest.raises(ProtocolError, match="magic"):
        decode_message(bad_magic)
    bad_version = bytes(data[:4]) + struct.pack("<H", 2) + bytes(data[6:])
    with pytest.raises(ProtocolError, match="version"):
        decode_message(bad_version)


def test_truncated_and_oversized_frames(rng):
    data = encode_query(QueryMessage(1, 3, random_features(rng, 4, frame_index=3)))
    with pytest.raises(ProtocolError):
        decode_message(data[:10])
    with pytest.raises(ProtocolError):
        decode_message(data[:-1])
    with pytest.raises(ProtocolError):
        decode_message(data + b"\x00")
    with pytest.raises(ProtocolError):
        decode_message(data, max_features=3)


def test_reply_status_must_agree_with_frame():
    body = struct.pack("<BIH", 0, 0xFFFFFFFF, 0)
    frame = HEADER.pack(b"XVQP", 1, 1, 1, 0, len(body)) + body
    with pytest.raises(ProtocolError):
        decode_message(frame)


def test_query_header_and_payload_must_agree(rng):
    features = random_features(rng, 2, frame_index=4)
    with pytest.raises(ProtocolError):
        encode_query(QueryMessage(1, 5, features))


def test_sequence_file(tmp_path, rng):
    frames = [random_features(rng, n, frame_index=t) for t, n in [(0, 5), (1, 0), (4, 12)]]
    path = tmp_path / "seq.xvff"
    save_sequence(path, frames)
    assert load_sequence(path) == frames
    with pytest.raises(FormatError):
        load_sequence(path, max_features=10)


def test_sequence_file_rejects_unordered_frames(tmp_path, rng):
    path = tmp_path / "seq.xvff"
    save_sequence(path, [random_features(rng, 2, frame_index=3), random_features(rng, 2, frame_index=3)])
    with pytest.raises(FormatError, match="increasing"):
        load_sequence(path)


def test_sequence_file_rejects_wrong_magic(tmp_path):
    path = tmp_path / "seq.xvff"
    path.write_bytes(b"XVGT" + struct.pack("<HI", 1, 0))
    with pytest.raises(FormatError, match="magic"):
        load_sequence(path)


def test_ground_truth_file(tmp_path):
    table = {0: np.array([3, 9, 11]), 2: np.array([], dtype=np.int64)}
    path = tmp_path / "gt.xvgt"
    save_ground_truth(path, table)
    loaded = load_ground_truth(path)
    assert sorted(loaded) == [0, 2]
    assert loaded[0].tolist() == [3, 9, 11]
    assert len(loaded[2]) == 0
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(FormatError):
        load_ground_truth(path)


def test_vocabulary_file(tmp_path, rng):
    vocab = build_vocabulary(random_descriptors(rng, 200), k_b=3, depth=2, seed=0)
    path = tmp_path / "vocab.xvvc"
    save_vocabulary(path, vocab)
    loaded = load_vocabulary(path)
    assert encode_vocabulary(loaded) == encode_vocabulary(vocab)
    sample = random_descriptors(rng, 50)
    assert np.array_equal(loaded.words(sample), vocab.words(sample))
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        load_vocabulary(path)
