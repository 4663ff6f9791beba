"""Store-and-forward relay between the local store and the remote cloud.

Clients are acked as soon as a write commits locally and lands in the
relay's write-ahead queue; shipping upstream happens later, whenever the
link allows. The queue is the gateway's append-only log: entry records and
ack records. Everything else (in-flight marks, counters) is volatile and
rebuilt on restart, so a crash between send and ack-record simply resends,
and the upstream stub's (key, version) dedupe keeps that idempotent.

The cloud itself is a stub with scripted availability; downstream sync is
out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import QueueFull
from .store import Gateway, Version, order_key

UP = "up"
DOWN = "down"

PENDING = "pending"
IN_FLIGHT = "in_flight"
ACKED = "acked"
FAILED = "failed"  # reserved; no legal transition enters it

OP_PUT = "put"
OP_DELETE = "delete"

MIN_BACKOFF_S = 1.0
MAX_BACKOFF_S = 300.0
DEFAULT_QUEUE_CAP = 10_000


@dataclass
class SyncEntry:
    seq: int
    op: str
    key: bytes
    version: Version
    payload_ref: int  # position of the value record in the durable log
    enqueued_at: float
    state: str = PENDING
    attempts: int = 0


@dataclass
class UpstreamLink:
    state: str = UP
    latency_ms: float = 50.0
    bandwidth_kbps: float = 1024.0
    probe_interval_s: float = 10.0
    backoff_s: float = MIN_BACKOFF_S
    min_backoff_s: float = MIN_BACKOFF_S
    max_backoff_s: float = MAX_BACKOFF_S


class UpstreamStub:
    """In-process cloud endpoint with scripted availability.

    Applies each (key, version) exactly once regardless of resends and keeps
    an ordered apply log so tests can compare per-key order with the client
    submission order.
    """

    def __init__(self):
        self.available = True
        self.state: dict[bytes, tuple[tuple[int, str, bool], bytes]] = {}
        self.attempts: dict[tuple[bytes, int, str], int] = {}
        self.applies: dict[tuple[bytes, int, str], int] = {}
        self.apply_log: list[tuple[bytes, Version]] = []

    def receive(self, op: str, key: bytes, version: Version, value: bytes) -> bool:
        if not self.available:
            return False
        vk = (key, version.counter, version.origin)
        self.attempts[vk] = self.attempts.get(vk, 0) + 1
        if vk in self.applies:
            return True  # duplicate resend: ack without reapplying
        self.applies[vk] = 1
        self.apply_log.append((key, version))
        order = (version.counter, version.origin, op == OP_DELETE)
        cur = self.state.get(key)
        if cur is None or order > cur[0]:
            self.state[key] = (order, value)
        return True

    def latest(self, key: bytes) -> tuple[tuple[int, str, bool], bytes] | None:
        return self.state.get(key)


@dataclass
class _WalRecord:
    kind: str  # "entry" | "ack"
    seq: int
    op: str = OP_PUT
    key: bytes = b""
    version: Version | None = None
    value: bytes = b""
    ts: float = 0.0


class Relay:
    """Gateway-side queue consumer; single appender, single drainer."""

    def __init__(self, gateway: Gateway, stub: UpstreamStub,
                 link: UpstreamLink | None = None,
                 queue_cap: int = DEFAULT_QUEUE_CAP):
        self.gateway = gateway
        self.stub = stub
        self.link = link or UpstreamLink()
        self.queue_cap = queue_cap
        self.reachable = True  # scripted transport path, set by scenarios
        self.alive = True
        self._wal: list[_WalRecord] = []  # durable, survives crash
        self._entries: dict[int, SyncEntry] = {}
        self._acked: set[int] = set()
        self._next_seq = 1
        self._cursor = 0  # index of the first possibly-unacked entry

    # --- client path ---

    def check_capacity(self):
        """Reject before the local commit so a full queue never strands a
        locally-acked write."""
        if not self.alive:
            raise RuntimeError("relay is down")
        if self.unacked_count() >= self.queue_cap:
            raise QueueFull(f"sync queue at cap {self.queue_cap}")

    def enqueue(self, op: str, key: bytes | str, version: Version,
                payload: bytes, now: float):
        kb = key.encode() if isinstance(key, str) else key
        seq = self._next_seq
        self._next_seq += 1
        self._wal.append(_WalRecord("entry", seq, op, kb, version, payload, now))
        self._entries[seq] = SyncEntry(seq, op, kb, version, len(self._wal) - 1, now)

    def client_write(self, key: bytes | str, value: bytes | None,
                     now: float = 0.0, cluster_epoch: int | None = None) -> Version:
        """Local commit plus durable enqueue as one logical step; the client
        never waits on the upstream."""
        self.check_capacity()
        if value is None:
            version = self.gateway.delete(key, cluster_epoch)
            op, payload = OP_DELETE, b""
        else:
            version = self.gateway.put(key, value, cluster_epoch)
            op, payload = OP_PUT, value
        self.enqueue(op, key, version, payload, now)
        return version

    # --- upstream path ---

    def drain(self, batch: int, budget_bytes: int | None = None) -> int:
        """Ship up to `batch` pending entries in seq order; an entry stays
        unsent while an earlier entry for its key is unacked. A transient
        upstream failure returns everything in flight to pending and doubles
        the backoff."""
        if not self.alive or self.link.state == DOWN:
            return 0
        acked = 0
        sends = 0
        spent = 0
        # Sends happen strictly in seq order and the round stops at the first
        # unacked failure, so an entry can never overtake an earlier entry
        # for the same key. The entries dict is insertion-ordered by seq, and
        # acks form a prefix of it, so a cursor skips the settled head.
        order = list(self._entries.values())
        while self._cursor < len(order) and order[self._cursor].state == ACKED:
            self._cursor += 1
        for entry in order[self._cursor:]:
            if sends >= batch:
                break
            if entry.state == ACKED:
                continue
            if budget_bytes is not None and spent + len(self._payload(entry)) > budget_bytes and sends > 0:
                break
            entry.state = IN_FLIGHT
            entry.attempts += 1
            sends += 1
            spent += len(self._payload(entry))
            ok = self.stub.receive(entry.op, entry.key, entry.version,
                                   self._payload(entry))
            if ok:
                self._wal.append(_WalRecord("ack", entry.seq))
                entry.state = ACKED
                self._acked.add(entry.seq)
                acked += 1
            else:
                entry.state = PENDING
                self._double_backoff()
                break  # upstream is unreachable; stop this drain round
        return acked

    def _payload(self, entry: SyncEntry) -> bytes:
        return self._wal[entry.payload_ref].value

    def probe(self, now: float = 0.0) -> str:
        """Mark the link from a live probe: success resets backoff, failure
        doubles it up to the cap."""
        if self.alive and self.reachable and self.stub.available:
            self.link.state = UP
            self.link.backoff_s = self.link.min_backoff_s
        else:
            self.link.state = DOWN
            self._double_backoff()
        return self.link.state

    def _double_backoff(self):
        self.link.backoff_s = min(self.link.backoff_s * 2,
                                  self.link.max_backoff_s)

    # --- introspection ---

    def unacked_count(self) -> int:
        return sum(1 for e in self._entries.values() if e.state != ACKED)

    def sync_lag(self, now: float = 0.0) -> tuple[int, float]:
        oldest = None
        count = 0
        for e in self._entries.values():
            if e.state == ACKED:
                continue
            count += 1
            if oldest is None or e.enqueued_at < oldest:
                oldest = e.enqueued_at
        return (count, 0.0 if oldest is None else max(0.0, now - oldest))

    def stats(self, now: float = 0.0) -> dict:
        pending, age = self.sync_lag(now)
        in_flight = sum(1 for e in self._entries.values()
                        if e.state == IN_FLIGHT)
        return {
            "pending": pending,
            "in_flight": in_flight,
            "acked_total": len(self._acked),
            "oldest_age_s": age,
            "link_state": self.link.state,
            "backoff_s": self.link.backoff_s,
        }

    def entries(self) -> list[SyncEntry]:
        return [self._entries[s] for s in sorted(self._entries)]

    # --- fault hooks ---

    def crash(self, torn_tail: bool = False):
        """Volatile state is lost; the write-ahead log is not. With
        torn_tail, a trailing ack record that was never flushed is dropped,
        so the entry it covered will be resent after restart (the upstream
        dedupe makes that harmless)."""
        self.alive = False
        self._entries.clear()
        self._acked.clear()
        self._cursor = 0
        if torn_tail and self._wal and self._wal[-1].kind == "ack":
            self._wal.pop()

    def restart(self):
        self.alive = True
        self._entries.clear()
        self._acked.clear()
        self._cursor = 0
        seq_top = 0
        for pos, rec in enumerate(self._wal):
            if rec.kind == "entry":
                self._entries[rec.seq] = SyncEntry(
                    rec.seq, rec.op, rec.key, rec.version, pos, rec.ts)
                seq_top = max(seq_top, rec.seq)
            else:
                entry = self._entries.get(rec.seq)
                if entry is not None:
                    entry.state = ACKED
                    self._acked.add(rec.seq)
        self._next_seq = seq_top + 1

    def wipe(self):
        """Disk loss: the queue itself is gone."""
        self.alive = False
        self._wal.clear()
        self._entries.clear()
        self._acked.clear()
        self._cursor = 0
