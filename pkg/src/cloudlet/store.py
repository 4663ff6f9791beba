"""Ring-partitioned replicated object store.

Placement is highest-random-weight hashing over 64-bit FNV-1a digests with
a repair pass that forces every partition to span at least two subclusters
whenever more than one has live storage nodes. Controllers act as gateways
only and never hold replicas.

Consistency is eventual: writes go to every live replica and acknowledge at
a majority of them, reads take the first live replica that satisfies the
gateway's monotonic per-key floor, and read-repair pushes the chosen record
to stale replicas. Conflicts resolve last-writer-wins on the total order
(counter, origin, tombstone bit).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

from .errors import (
    DuplicateId,
    EmptyNodeSet,
    NoLiveReplica,
    NotFound,
    StaleGateway,
    ValidationError,
)
from .topology import NodeSpec

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211

DEFAULT_PARTITIONS = 64
DEFAULT_RF = 3
MAX_VALUE_BYTES = 1 << 20


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def checksum_hex(value: bytes) -> str:
    return format(fnv1a64(value), "016x")


def _as_bytes(s: bytes | str) -> bytes:
    return s.encode("utf-8") if isinstance(s, str) else s


@dataclass(frozen=True)
class Version:
    counter: int
    origin: str


@dataclass(frozen=True)
class ObjectRecord:
    key: bytes
    value: bytes
    version: Version
    checksum: int
    tombstone: bool = False

    @classmethod
    def make(cls, key: bytes | str, value: bytes, version: Version,
             tombstone: bool = False) -> "ObjectRecord":
        return cls(_as_bytes(key), value, version, fnv1a64(value), tombstone)


def order_key(record: ObjectRecord) -> tuple[int, str, bool]:
    """Total order for conflict resolution; tombstone bit breaks exact ties."""
    return (record.version.counter, record.version.origin, record.tombstone)


@dataclass(frozen=True)
class Ring:
    partition_count: int = DEFAULT_PARTITIONS
    replication_factor: int = DEFAULT_RF
    assignment: tuple[tuple[str, ...], ...] = ()

    def nodes(self) -> set[str]:
        return {n for replicas in self.assignment for n in replicas}


@dataclass(frozen=True)
class MoveTask:
    partition: int
    source: str | None  # None when no old replica survived to copy from
    destination: str


def _weight(node_id: str, partition: int) -> int:
    # Single-pass FNV-1a barely diffuses a short trailing suffix into the
    # high bits, which collapses highest-random-weight rankings; re-hashing
    # the digest restores avalanche while keeping the scheme deterministic.
    tag = fnv1a64(f"{node_id}:{partition}".encode())
    return fnv1a64(tag.to_bytes(8, "big"))


def ring_build(storage_nodes: Iterable[NodeSpec],
               partition_count: int = DEFAULT_PARTITIONS,
               replication_factor: int = DEFAULT_RF) -> Ring:
    """Deterministic HRW placement plus the subcluster-spread repair pass."""
    by_id: dict[str, NodeSpec] = {}
    for n in storage_nodes:
        if n.node_id in by_id and by_id[n.node_id] != n:
            raise DuplicateId(f"conflicting specs for node {n.node_id}")
        by_id[n.node_id] = n
    nodes = sorted(by_id.values(), key=lambda n: n.node_id)
    if not nodes:
        raise EmptyNodeSet("ring requires at least one storage node")
    if partition_count < 1 or partition_count & (partition_count - 1):
        raise ValueError("partition_count must be a power of two")
    if replication_factor < 1:
        raise ValueError("replication_factor must be >= 1")

    all_subs = {n.subcluster_id for n in nodes}
    assignment = []
    for p in range(partition_count):
        ranked = sorted(nodes, key=lambda n: (-_weight(n.node_id, p), n.node_id))
        chosen = ranked[:replication_factor]
        subs = {n.subcluster_id for n in chosen}
        if len(subs) == 1 and len(all_subs) > 1 and len(chosen) >= 2:
            # Swap the lowest-weight pick for the best-ranked outsider so the
            # partition survives the loss of a whole subcluster.
            outsider = next((n for n in ranked[replication_factor:]
                             if n.subcluster_id not in subs), None)
            if outsider is not None:
                chosen[-1] = outsider
                chosen.sort(key=lambda n: (-_weight(n.node_id, p), n.node_id))
        assignment.append(tuple(n.node_id for n in chosen))
    return Ring(partition_count, replication_factor, tuple(assignment))


def partition_of(ring: Ring, key: bytes | str) -> int:
    return fnv1a64(_as_bytes(key)) % ring.partition_count


def lookup(ring: Ring, key: bytes | str) -> tuple[str, ...]:
    return ring.assignment[partition_of(ring, key)]


def rebalance(ring: Ring, new_live_set: Iterable[NodeSpec]
              ) -> tuple[Ring, list[MoveTask]]:
    """Rebuild the ring for the new live set and enumerate replica moves.

    A task's source is the first surviving replica of the old assignment,
    or None when the partition lost every copy.
    """
    new_ring = ring_build(new_live_set, ring.partition_count,
                          ring.replication_factor)
    live = new_ring.nodes()
    tasks = []
    for p in range(new_ring.partition_count):
        old = ring.assignment[p] if p < len(ring.assignment) else ()
        source = next((n for n in old if n in live), None)
        for dest in new_ring.assignment[p]:
            if dest not in old:
                tasks.append(MoveTask(p, source, dest))
    return new_ring, tasks


def moved_slot_fraction(old: Ring, new: Ring) -> float:
    """Fraction of replica slots in the new ring not already replicas of the
    same partition in the old ring."""
    moved = 0
    total = 0
    for p in range(new.partition_count):
        old_set = set(old.assignment[p]) if p < len(old.assignment) else set()
        for n in new.assignment[p]:
            total += 1
            if n not in old_set:
                moved += 1
    return moved / total if total else 0.0


def repair_scan(ring: Ring, stored_state: Mapping[str, Iterable[int]]
                ) -> list[tuple[int, int]]:
    """Partitions serving fewer live replicas than the achievable target.

    stored_state maps each live node to the partitions it can serve. The
    target is min(rf, live nodes), or rf when nothing is live at all (every
    partition is then fully missing).
    """
    serving = {node: set(parts) for node, parts in stored_state.items()}
    target_cap = min(ring.replication_factor, len(serving)) if serving \
        else ring.replication_factor
    out = []
    for p, replicas in enumerate(ring.assignment):
        live = sum(1 for n in replicas if n in serving and p in serving[n])
        target = min(target_cap, len(replicas))
        if live < target:
            out.append((p, target - live))
    return out


class StorageNode:
    """Append-only log plus in-memory index; crash keeps the log, disk loss
    does not. Checksums are verified on read and corrupt entries treated as
    missing."""

    def __init__(self, node_id: str, subcluster_id: str | None = None):
        self.node_id = node_id
        self.subcluster_id = subcluster_id
        self.alive = True
        self._log: list[ObjectRecord] = []
        self._index: dict[bytes, ObjectRecord] = {}

    def apply(self, record: ObjectRecord) -> bool:
        """Persist a record; the index keeps whichever version wins LWW."""
        if not self.alive:
            raise RuntimeError(f"apply on down node {self.node_id}")
        self._log.append(record)
        cur = self._index.get(record.key)
        if cur is None or order_key(record) > order_key(cur):
            self._index[record.key] = record
            return True
        return False

    def read(self, key: bytes | str) -> ObjectRecord | None:
        if not self.alive:
            return None
        rec = self._index.get(_as_bytes(key))
        if rec is None:
            return None
        if fnv1a64(rec.value) != rec.checksum:
            del self._index[rec.key]  # corrupt: treat as missing
            return None
        return rec

    def records(self) -> Iterator[ObjectRecord]:
        return iter(list(self._index.values()))

    def held_partitions(self, ring: Ring) -> set[int]:
        return {partition_of(ring, rec.key) for rec in self.records()}

    def crash(self):
        self.alive = False
        self._index.clear()

    def restart(self):
        self.alive = True
        self._index.clear()
        for rec in self._log:
            cur = self._index.get(rec.key)
            if cur is None or order_key(rec) > order_key(cur):
                self._index[rec.key] = rec

    def wipe(self):
        self.alive = False
        self._log.clear()
        self._index.clear()


def quorum(live_count: int) -> int:
    return (live_count + 2) // 2


def apply_move(ring: Ring, task: MoveTask,
               nodes: Mapping[str, StorageNode]) -> int:
    """Copy one partition's records from source to destination; returns the
    number of records transferred."""
    if task.source is None:
        return 0
    src = nodes.get(task.source)
    dst = nodes.get(task.destination)
    if src is None or dst is None or not src.alive or not dst.alive:
        return 0
    moved = 0
    for rec in src.records():
        if partition_of(ring, rec.key) == task.partition:
            dst.apply(rec)
            moved += 1
    return moved


class Gateway:
    """Controller-side access point: assigns versions, runs quorum writes,
    monotonic reads with fallback, and read-repair. Single-threaded by
    construction; the simulator provides the per-key linearization point."""

    def __init__(self, gateway_id: str, ring: Ring,
                 nodes: Mapping[str, StorageNode], epoch: int = 0):
        self.gateway_id = gateway_id
        self.ring = ring
        self.epoch = epoch
        self._nodes = nodes
        self._floor: dict[bytes, tuple[int, str, bool]] = {}

    def refresh(self, ring: Ring, epoch: int):
        self.ring = ring
        self.epoch = epoch

    def _check_epoch(self, cluster_epoch: int | None):
        if cluster_epoch is not None and cluster_epoch != self.epoch:
            raise StaleGateway(
                f"gateway {self.gateway_id} at epoch {self.epoch}, "
                f"cluster at {cluster_epoch}", current_epoch=cluster_epoch)

    def _live_replicas(self, key: bytes) -> list[StorageNode]:
        replicas = lookup(self.ring, key)
        nodes = [self._nodes[r] for r in replicas if r in self._nodes]
        return [n for n in nodes if n.alive]

    def _next_version(self, key: bytes, live: list[StorageNode]) -> Version:
        counter = self._floor.get(key, (0,))[0]
        for n in live:
            rec = n.read(key)
            if rec is not None:
                counter = max(counter, rec.version.counter)
        return Version(counter + 1, self.gateway_id)

    def _write(self, key: bytes | str, value: bytes, tombstone: bool,
               cluster_epoch: int | None) -> Version:
        self._check_epoch(cluster_epoch)
        key = _as_bytes(key)
        if len(value) > MAX_VALUE_BYTES:
            raise ValidationError("value exceeds the 1 MiB cap")
        live = self._live_replicas(key)
        if not live:
            raise NoLiveReplica(f"no live replica for key {key!r}")
        version = self._next_version(key, live)
        record = ObjectRecord.make(key, value, version, tombstone)
        acks = 0
        for n in live:
            n.apply(record)
            acks += 1
        if acks < quorum(len(live)):
            raise NoLiveReplica(f"quorum not reached for key {key!r}")
        self._floor[key] = order_key(record)
        return version

    def put(self, key: bytes | str, value: bytes,
            cluster_epoch: int | None = None) -> Version:
        return self._write(key, value, False, cluster_epoch)

    def delete(self, key: bytes | str,
               cluster_epoch: int | None = None) -> Version:
        return self._write(key, b"", True, cluster_epoch)

    def get(self, key: bytes | str,
            cluster_epoch: int | None = None) -> ObjectRecord:
        """First live replica meeting the monotonic floor; falls back through
        the replica list on misses and settles for the newest record found
        when nothing meets the floor (possible only past rf-1 failures)."""
        self._check_epoch(cluster_epoch)
        key = _as_bytes(key)
        live = self._live_replicas(key)
        if not live:
            raise NoLiveReplica(f"no live replica for key {key!r}")
        floor = self._floor.get(key)
        chosen = None
        best = None
        for n in live:
            rec = n.read(key)
            if rec is None:
                continue
            if best is None or order_key(rec) > order_key(best):
                best = rec
            if floor is None or order_key(rec) >= floor:
                chosen = rec
                break
        if chosen is None:
            chosen = best
        if chosen is None:
            raise NotFound(f"key {key!r} not found")
        if floor is None or order_key(chosen) > floor:
            self._floor[key] = order_key(chosen)
        for n in live:  # read-repair: bring stale replicas up to the result
            cur = n.read(key)
            if cur is None or order_key(cur) < order_key(chosen):
                n.apply(chosen)
        if chosen.tombstone:
            raise NotFound(f"key {key!r} deleted")
        return chosen


def ring_to_document(ring: Ring) -> dict:
    return {
        "partition_count": ring.partition_count,
        "replication_factor": ring.replication_factor,
        "assignment": [list(r) for r in ring.assignment],
    }
