"""Content-hash-keyed, per-node-owned append-only message store with
pairwise anti-entropy synchronization gated on link quality.

Each node owns exactly one writable namespace (its own); everything
else is a read-only replica. Messages are immutable and identified by
a digest of (owner, topic, payload, created_at), so replicas can
reconcile by exchanging hash sets and transferring only the payloads
the other side lacks. An interrupted payload transfer leaves the
receiver without that message; the next session's hash-set difference
picks it up again, so at most one partial transfer is ever wasted per
interruption.

Wire protocol (byte layout, little-endian):
    HELLO   = b"HELO" + u32 node_id + u32 message_count
    HASHSET = b"HSET" + u32 count + count * 32-byte sorted hashes
    MSG     = b"MSG0" + 32-byte hash + u32 owner + f64 created_at
              + u16 topic_len + topic utf-8 + u32 payload_len + payload
    ACK     = b"ACK0" + 32-byte hash
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

MAX_MESSAGE_BYTES = 256 * 1024
Q_SYNC = 0.3
SYNC_BACKOFF = 2.0
# topics earlier in this list transfer first; ties broken oldest-first
PRIORITY_TOPICS = ("artifacts",)


def message_hash(owner: int, topic: str, payload: bytes, created_at: float) -> bytes:
    h = hashlib.sha256()
    h.update(struct.pack("<Id", owner, created_at))
    h.update(topic.encode())
    h.update(b"\x00")
    h.update(payload)
    return h.digest()


@dataclass(frozen=True)
class DbMessage:
    owner: int
    topic: str
    payload: bytes
    created_at: float
    hash: bytes = b""

    def __post_init__(self):
        expect = message_hash(self.owner, self.topic, self.payload, self.created_at)
        if self.hash == b"":
            object.__setattr__(self, "hash", expect)
        elif self.hash != expect:
            raise ValueError("message hash does not match content")

    def encode(self) -> bytes:
        t = self.topic.encode()
        return (b"MSG0" + self.hash
                + struct.pack("<IdH", self.owner, self.created_at, len(t))
                + t + struct.pack("<I", len(self.payload)) + self.payload)

    @staticmethod
    def decode(buf: bytes) -> "DbMessage":
        if buf[:4] != b"MSG0":
            raise ValueError("bad MSG frame")
        h = buf[4:36]
        owner, created_at, tlen = struct.unpack_from("<IdH", buf, 36)
        off = 36 + struct.calcsize("<IdH")
        topic = buf[off:off + tlen].decode()
        off += tlen
        (plen,) = struct.unpack_from("<I", buf, off)
        payload = buf[off + 4:off + 4 + plen]
        return DbMessage(owner, topic, payload, created_at, h)


def encode_hello(node_id: int, count: int) -> bytes:
    return b"HELO" + struct.pack("<II", node_id, count)


def encode_hashset(hashes) -> bytes:
    hs = sorted(hashes)
    return b"HSET" + struct.pack("<I", len(hs)) + b"".join(hs)


def encode_ack(h: bytes) -> bytes:
    return b"ACK0" + h


class SyncPhase(str, Enum):
    HASH_EXCHANGE = "HASH_EXCHANGE"
    TRANSFER = "TRANSFER"
    DONE = "DONE"
    INTERRUPTED = "INTERRUPTED"


@dataclass
class SyncSession:
    peer: int
    phase: SyncPhase = SyncPhase.HASH_EXCHANGE
    pending: list = field(default_factory=list)     # hashes still to receive
    transferred: int = 0
    bytes_sent: int = 0                             # both directions, payloads + framing


class Link:
    """Byte-budgeted channel; delivering past the budget cuts the link."""

    def __init__(self, byte_budget: float = float("inf")):
        self.remaining = byte_budget
        self.alive = True

    def deliver(self, n: int) -> bool:
        """True when all n bytes arrive; a shortfall kills the link."""
        if not self.alive:
            return False
        if n <= self.remaining:
            self.remaining -= n
            return True
        self.remaining = 0
        self.alive = False
        return False


class DbStore:
    """One node's view of the distributed store."""

    def __init__(self, node_id: int, directory: str | Path | None = None):
        self.node_id = node_id
        self.messages: dict[bytes, DbMessage] = {}
        self.bytes_sent_total = 0
        self._last_attempt: dict[int, float] = {}
        self._dir = Path(directory) if directory else None
        if self._dir:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._replay()

    # ------------------------------------------------------------ local api

    def put(self, topic: str, payload: bytes, created_at: float) -> DbMessage:
        """Append to the owning namespace; idempotent for identical content."""
        if len(payload) > MAX_MESSAGE_BYTES:
            raise ValueError(f"payload exceeds {MAX_MESSAGE_BYTES} bytes")
        msg = DbMessage(self.node_id, topic, bytes(payload), created_at)
        if msg.hash in self.messages:
            return self.messages[msg.hash]
        self._store(msg)
        return msg

    def read(self, owner: int, topic: str) -> list[DbMessage]:
        out = [m for m in self.messages.values()
               if m.owner == owner and m.topic == topic]
        out.sort(key=lambda m: (m.created_at, m.hash))
        return out

    def topics(self, owner: int) -> set:
        return {m.topic for m in self.messages.values() if m.owner == owner}

    def hashes(self) -> set:
        return set(self.messages)

    def _store(self, msg: DbMessage):
        self.messages[msg.hash] = msg
        if self._dir:
            with open(self._dir / f"{msg.owner}.log", "ab") as f:
                frame = msg.encode()
                f.write(struct.pack("<I", len(frame)) + frame)

    def _replay(self):
        for path in sorted(self._dir.glob("*.log")):
            data = path.read_bytes()
            off = 0
            while off + 4 <= len(data):
                (n,) = struct.unpack_from("<I", data, off)
                frame = data[off + 4:off + 4 + n]
                if len(frame) < n:
                    break                      # truncated tail from a crash
                msg = DbMessage.decode(frame)
                self.messages[msg.hash] = msg
                off += 4 + n


def _transfer_order(store: DbStore, hashes) -> list:
    def key(h):
        m = store.messages[h]
        pri = PRIORITY_TOPICS.index(m.topic) if m.topic in PRIORITY_TOPICS \
            else len(PRIORITY_TOPICS)
        return (pri, m.created_at, h)
    return sorted(hashes, key=key)


def maybe_sync(store: DbStore, peer: DbStore, quality: float,
               now: float = 0.0, link: Link | None = None) -> SyncSession | None:
    """Anti-entropy pass between two stores over one link.

    Opens a session only when link quality clears q_sync and the
    per-peer backoff has elapsed. Hash sets are exchanged, then missing
    payloads flow one-by-one in both directions; a link cut mid-payload
    marks the session INTERRUPTED and that message stays missing.
    """
    if quality < Q_SYNC:
        return None
    last = store._last_attempt.get(peer.node_id)
    if last is not None and now - last < SYNC_BACKOFF:
        return None
    store._last_attempt[peer.node_id] = now
    peer._last_attempt[store.node_id] = now

    link = link or Link()
    session = SyncSession(peer=peer.node_id)

    meta = (len(encode_hello(store.node_id, len(store.messages)))
            + len(encode_hello(peer.node_id, len(peer.messages)))
            + len(encode_hashset(store.hashes()))
            + len(encode_hashset(peer.hashes())))
    session.bytes_sent += meta
    if not link.deliver(meta):
        session.phase = SyncPhase.INTERRUPTED
        return session

    want = _transfer_order(peer, peer.hashes() - store.hashes())
    give = _transfer_order(store, store.hashes() - peer.hashes())
    session.pending = list(want) + list(give)
    session.phase = SyncPhase.TRANSFER

    transfers = [(peer, store, h) for h in want] + [(store, peer, h) for h in give]
    for source, sink, h in transfers:
        frame = source.messages[h].encode()
        n = len(frame) + len(encode_ack(h))
        before = link.remaining
        if not link.deliver(n):
            # partial payload on the wire is wasted but still counted
            wasted = n if before == float("inf") else int(before)
            session.bytes_sent += wasted
            source.bytes_sent_total += wasted
            session.phase = SyncPhase.INTERRUPTED
            return session
        session.bytes_sent += n
        source.bytes_sent_total += n
        sink._store(source.messages[h])
        session.pending.remove(h)
        session.transferred += 1

    session.phase = SyncPhase.DONE
    return session
