"""
Overlap — Camera Peer.
Decentralised lockstep session between two cameras over a reliable byte stream.

Per frame t of the local sequence:
1. Ingest: transform the frame and append it to the local view database
2. Send one request: QUERY when the sharing schedule fires, HEARTBEAT otherwise
3. Until the round is complete, read frames from the partner:
   - QUERY / HEARTBEAT -> answer with a REPLY
   - REPLY             -> answer to our request of this round
   - FIN               -> partner's sequence is over (it keeps serving)
4. Record the round in the RecognitionLog

After the last frame the peer sends FIN and keeps answering until the partner
sends its own FIN.
"""

import asyncio
import json
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import pandas as pd

from overlap.core.config import FEATURE_RECORD_BYTES, PeerConfig, settings
from overlap.core.database import ViewDatabase
from overlap.core.errors import ChannelClosedError, FormatError, PeerSessionError, ProtocolError
from overlap.ml.vocabulary import Vocabulary
from overlap.models.schemas import (
    FrameFeatures,
    MessageType,
    QueryMessage,
    RecognitionLog,
    ReplyMessage,
    ReplyStatus,
    RoundRecord,
    ServedRecord,
    WireMessage,
)
from overlap.services import codec
from overlap.services.recognition import handle_query

logger = logging.getLogger(__name__)

# header + block header + 65535 records
MAX_FRAME_BYTES = codec.HEADER.size + codec.BLOCK_HEADER.size + 0xFFFF * FEATURE_RECORD_BYTES


# ============================================================
# Sharing schedule
# ============================================================

def should_share(t: int, init_window: int, acquisition_rate: int, sharing_rate: int) -> bool:
    """True when frame t is shared: u = max(t - L, -1) is non-negative and a multiple of r/f."""
    period = acquisition_rate // sharing_rate
    if period < 1 or acquisition_rate % sharing_rate:
        raise ValueError("acquisition_rate / sharing_rate must be a positive integer")
    u = max(t - init_window, -1)
    return u >= 0 and u % period == 0


def sharing_count(n_frames: int, init_window: int, acquisition_rate: int, sharing_rate: int) -> int:
    """Number of shared frames among t = 0 .. n_frames - 1."""
    if n_frames <= init_window:
        return 0
    period = acquisition_rate // sharing_rate
    return (n_frames - 1 - init_window) // period + 1


# ============================================================
# Channels
# ============================================================

class Channel(ABC):
    """Reliable, ordered, duplex stream carrying whole wire frames."""

    @abstractmethod
    async def send(self, data: bytes) -> None:
        ...

    @abstractmethod
    async def receive(self) -> bytes:
        ...

    @abstractmethod
    async def close(self) -> None:
        ...


async def _read_frame(reader: asyncio.StreamReader) -> bytes:
    try:
        header = await reader.readexactly(codec.HEADER.size)
    except asyncio.IncompleteReadError as exc:
        raise ChannelClosedError("partner closed the channel") from exc
    _, _, _, payload_len = codec.decode_header(header)
    if payload_len > MAX_FRAME_BYTES:
        raise ProtocolError(f"payload of {payload_len} bytes exceeds the frame limit")
    try:
        payload = await reader.readexactly(payload_len)
    except asyncio.IncompleteReadError as exc:
        raise ChannelClosedError("partner closed the channel mid-frame") from exc
    return header + payload


class MemoryChannel(Channel):
    """One end of an in-process pipe."""

    def __init__(self, inbox: asyncio.StreamReader, outbox: asyncio.StreamReader):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    async def send(self, data: bytes) -> None:
        if self._closed or self._outbox.at_eof():
            raise ChannelClosedError("channel is closed")
        self._outbox.feed_data(data)
        await asyncio.sleep(0)

    async def receive(self) -> bytes:
        return await _read_frame(self._inbox)

    async def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.feed_eof()


def memory_channel_pair() -> Tuple[MemoryChannel, MemoryChannel]:
    """Two connected in-process channel ends (call from a running event loop)."""
    a_inbox, b_inbox = asyncio.StreamReader(), asyncio.StreamReader()
    return MemoryChannel(a_inbox, b_inbox), MemoryChannel(b_inbox, a_inbox)


class TcpChannel(Channel):
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self._reader = reader
        self._writer = writer

    async def send(self, data: bytes) -> None:
        try:
            self._writer.write(data)
            await self._writer.drain()
        except (ConnectionError, OSError) as exc:
            raise ChannelClosedError(f"send failed: {exc}") from exc

    async def receive(self) -> bytes:
        try:
            return await _read_frame(self._reader)
        except (ConnectionError, OSError) as exc:
            raise ChannelClosedError(f"receive failed: {exc}") from exc

    async def close(self) -> None:
        if self._writer.is_closing():
            return
        self._writer.close()
        try:
            await self._writer.wait_closed()
        except (ConnectionError, OSError):
            pass


async def listen(host: str, port: int) -> TcpChannel:
    """Accept exactly one partner connection."""
    accepted: asyncio.Future = asyncio.get_running_loop().create_future()

    async def on_connect(reader, writer):
        if accepted.done():
            writer.close()
            return
        accepted.set_result(TcpChannel(reader, writer))

    server = await asyncio.start_server(on_connect, host, port)
    logger.info("listening on %s:%d", host, port)
    try:
        return await accepted
    finally:
        server.close()


async def connect(
    host: str,
    port: int,
    retries: int = settings.CONNECT_RETRIES,
    delay: float = settings.CONNECT_RETRY_DELAY,
) -> TcpChannel:
    """Connect to a listening partner, retrying while it starts up."""
    for attempt in range(retries + 1):
        try:
            reader, writer = await asyncio.open_connection(host, port)
            return TcpChannel(reader, writer)
        except OSError as exc:
            if attempt == retries:
                raise ChannelClosedError(f"cannot reach {host}:{port}: {exc}") from exc
            await asyncio.sleep(delay)
    raise ChannelClosedError(f"cannot reach {host}:{port}")


async def tcp_channel_pair(host: str = "127.0.0.1") -> Tuple[TcpChannel, TcpChannel]:
    """Two ends of a loopback TCP connection on an ephemeral port."""
    accepted: asyncio.Future = asyncio.get_running_loop().create_future()

    async def on_connect(reader, writer):
        if not accepted.done():
            accepted.set_result(TcpChannel(reader, writer))

    server = await asyncio.start_server(on_connect, host, 0)
    port = server.sockets[0].getsockname()[1]
    try:
        reader, writer = await asyncio.open_connection(host, port)
        listener = await accepted
    finally:
        server.close()
    return listener, TcpChannel(reader, writer)


# ============================================================
# Peer
# ============================================================

class CameraPeer:
    """
    One camera of the pair.

    The sequence side (ingest) is the only writer of `db`; requests from the
    partner are answered from the same database, read-only.
    """

    def __init__(self, cfg: PeerConfig, vocab: Vocabulary, channel: Channel):
        self.cfg = cfg
        self.vocab = vocab
        self.channel = channel
        self.db = ViewDatabase()
        self.log = RecognitionLog(camera_id=cfg.camera_id)
        self.partner_finished = False

    # ============================================================
    # Messaging
    # ============================================================

    async def _send(self, data: bytes) -> None:
        await self.channel.send(data)
        self.log.bytes_sent += len(data)

    async def _receive(self) -> WireMessage:
        data = await self.channel.receive()
        message = codec.decode_message(data, self.cfg.max_features)
        if message.camera_id == self.cfg.camera_id:
            raise ProtocolError(f"partner also claims camera id {message.camera_id}")
        return message

    def answer(self, message: WireMessage) -> ReplyMessage:
        """Reply to one partner request."""
        if message.msg_type == MessageType.QUERY:
            reply = handle_query(self.db, self.vocab, message.query, self.cfg)
        elif len(self.db) < self.cfg.init_window:
            reply = ReplyMessage(ReplyStatus.INITIALISING)
        else:
            reply = ReplyMessage(ReplyStatus.NO_MATCH)
        self.log.served.append(
            ServedRecord(message.frame_index, message.msg_type == MessageType.QUERY, reply)
        )
        return reply

    async def _serve(self, message: WireMessage) -> None:
        reply = self.answer(message)
        await self._send(codec.encode_reply(self.cfg.camera_id, message.frame_index, reply))

    # ============================================================
    # Session
    # ============================================================

    def ingest(self, features: FrameFeatures) -> FrameFeatures:
        """Add one frame to the local database; returns the feature set to share."""
        bow, direct = self.vocab.transform(features, self.cfg.direct_index_level)
        self.db.add(features.frame_index, bow, features, direct)
        if len(features) > self.cfg.max_features:
            logger.warning(
                "camera %d frame %d: %d features, sharing the first %d",
                self.cfg.camera_id, features.frame_index, len(features), self.cfg.max_features,
            )
            keep = self.cfg.max_features
            return FrameFeatures(features.frame_index, features.points[:keep], features.descriptors[:keep])
        return features

    async def _round(self, round_index: int, features: FrameFeatures) -> RoundRecord:
        t = features.frame_index
        shared = should_share(
            t, self.cfg.init_window, self.cfg.acquisition_rate, self.cfg.sharing_rate
        )
        record = RoundRecord(round_index, t, shared, None)
        self.log.rounds.append(record)

        # 1. Our request
        if shared:
            await self._send(codec.encode_query(QueryMessage(self.cfg.camera_id, t, features)))
        else:
            await self._send(codec.encode_heartbeat(self.cfg.camera_id, t))

        # 2. Until our reply is in and the partner's request of this round is served
        partner_served = self.partner_finished
        while record.reply is None or not partner_served:
            message = await self._receive()
            if message.msg_type == MessageType.REPLY:
                if record.reply is not None:
                    raise ProtocolError("second reply within one round")
                record.reply = message.reply
            elif message.msg_type == MessageType.FIN:
                self.partner_finished = True
                partner_served = True
            else:
                if partner_served:
                    raise ProtocolError("partner sent two requests within one round")
                await self._serve(message)
                partner_served = True

        logger.debug(
            "camera %d round %d frame %d shared=%s reply=%s",
            self.cfg.camera_id, round_index, t, shared, record.reply.status.value,
        )
        return record

    async def run(self, sequence: Iterable[FrameFeatures]) -> RecognitionLog:
        """Process the whole local sequence, then serve until the partner finishes."""
        last_index = 0
        try:
            for round_index, frame in enumerate(sequence):
                shared_features = self.ingest(frame)
                await self._round(round_index, shared_features)
                last_index = frame.frame_index

            await self._send(codec.encode_fin(self.cfg.camera_id, last_index))
            while not self.partner_finished:
                message = await self._receive()
                if message.msg_type == MessageType.FIN:
                    self.partner_finished = True
                elif message.msg_type == MessageType.REPLY:
                    raise ProtocolError("unexpected reply after end of sequence")
                else:
                    await self._serve(message)
        except (ChannelClosedError, FormatError) as exc:
            await self.channel.close()
            raise PeerSessionError(
                f"camera {self.cfg.camera_id} session aborted after "
                f"{len(self.log.rounds)} rounds: {exc}",
                self.log,
            ) from exc

        self.log.complete = True
        await self.channel.close()
        matches = sum(
            1 for r in self.log.queries if r.reply and r.reply.status == ReplyStatus.MATCH
        )
        logger.info(
            "camera %d done: %d frames, %d queries, %d matches, %d bytes sent, %d requests served",
            self.cfg.camera_id, len(self.log.rounds), len(self.log.queries), matches,
            self.log.bytes_sent, len(self.log.served),
        )
        return self.log


async def run_peer(
    cfg: PeerConfig, vocab: Vocabulary, sequence: Iterable[FrameFeatures], channel: Channel
) -> RecognitionLog:
    return await CameraPeer(cfg, vocab, channel).run(sequence)


async def run_pair(
    vocab: Vocabulary,
    cfg_1: PeerConfig,
    sequence_1: List[FrameFeatures],
    cfg_2: PeerConfig,
    sequence_2: List[FrameFeatures],
    transport: str = "memory",
    host: str = "127.0.0.1",
) -> Tuple[RecognitionLog, RecognitionLog]:
    """Run both peers concurrently over an in-process pipe or loopback TCP."""
    if cfg_1.camera_id == cfg_2.camera_id:
        raise ValueError("the two peers need distinct camera ids")
    if transport == "memory":
        end_1, end_2 = memory_channel_pair()
    elif transport == "tcp":
        end_1, end_2 = await tcp_channel_pair(host)
    else:
        raise ValueError(f"unknown transport {transport!r}")

    log_1, log_2 = await asyncio.gather(
        run_peer(cfg_1, vocab, sequence_1, end_1),
        run_peer(cfg_2, vocab, sequence_2, end_2),
    )
    return log_1, log_2


# ============================================================
# Log persistence
# ============================================================

LOG_COLUMNS = ["round", "frame_index", "shared", "status", "matched_frame", "inlier_count"]


def log_table(log: RecognitionLog) -> pd.DataFrame:
    rows = []
    for r in log.rounds:
        rows.append(
            {
                "round": r.round_index,
                "frame_index": r.frame_index,
                "shared": int(r.shared),
                "status": r.reply.status.value if r.reply else "",
                "matched_frame": -1 if not r.reply or r.reply.matched_frame is None else r.reply.matched_frame,
                "inlier_count": r.reply.inlier_count if r.reply else 0,
            }
        )
    return pd.DataFrame(rows, columns=LOG_COLUMNS)


def save_log(path: Union[str, Path], log: RecognitionLog) -> None:
    """Rounds as CSV, session summary as a JSON sidecar next to it."""
    path = Path(path)
    log_table(log).to_csv(path, index=False)
    summary = {
        "camera_id": log.camera_id,
        "complete": log.complete,
        "bytes_sent": log.bytes_sent,
        "n_rounds": len(log.rounds),
        "n_queries": len(log.queries),
        "n_served": len(log.served),
    }
    path.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def load_log(path: Union[str, Path]) -> RecognitionLog:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not path.exists() or not sidecar.exists():
        raise FileNotFoundError(f"recognition log not found: {path}")
    summary = json.loads(sidecar.read_text())
    table = pd.read_csv(path, keep_default_na=False, dtype={"status": str})
    missing = set(LOG_COLUMNS) - set(table.columns)
    if missing:
        raise FormatError(f"{path}: missing columns {sorted(missing)}")

    log = RecognitionLog(
        camera_id=int(summary["camera_id"]),
        bytes_sent=int(summary.get("bytes_sent", 0)),
        complete=bool(summary.get("complete", False)),
    )
    for row in table.itertuples(index=False):
        reply: Optional[ReplyMessage] = None
        if row.status:
            matched = None if int(row.matched_frame) < 0 else int(row.matched_frame)
            reply = ReplyMessage(ReplyStatus(row.status), matched, int(row.inlier_count))
        log.rounds.append(RoundRecord(int(row.round), int(row.frame_index), bool(row.shared), reply))
    return log
