"""Node lifecycle: join, heartbeats, failure suspicion, removal.

Controllers keep the table with a primary-controller lease (lowest live
controller id) instead of a consensus protocol; at desk scale availability
wins over strictness.

The membership epoch increments exactly when the ring-eligible set (nodes
in joining/active/suspect) changes, so epochs map one-to-one onto ring
rebalances.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DuplicateId, UnknownNode

PROVISIONED = "provisioned"
JOINING = "joining"
ACTIVE = "active"
SUSPECT = "suspect"
DOWN = "down"
REMOVED = "removed"

RING_ELIGIBLE = frozenset({JOINING, ACTIVE, SUSPECT})

DEFAULT_HEARTBEAT_INTERVAL_S = 2.0
SUSPECT_AFTER_INTERVALS = 1
DOWN_AFTER_INTERVALS = 3


@dataclass
class NodeLifecycle:
    node_id: str
    state: str
    last_heartbeat: float
    incarnation: int = 1


@dataclass(frozen=True)
class StateChange:
    node_id: str
    old_state: str
    new_state: str


class MembershipTable:
    """Single authority for node states; mutations arrive serialized through
    the lease holder, reads are plain snapshots tagged with the epoch."""

    def __init__(self, heartbeat_interval_s: float = DEFAULT_HEARTBEAT_INTERVAL_S):
        self.heartbeat_interval_s = heartbeat_interval_s
        self.epoch = 0
        self._members: dict[str, NodeLifecycle] = {}

    # --- reads ---

    def members(self) -> dict[str, NodeLifecycle]:
        return dict(self._members)

    def get(self, node_id: str) -> NodeLifecycle:
        m = self._members.get(node_id)
        if m is None:
            raise UnknownNode(f"unknown node {node_id}")
        return m

    def state_of(self, node_id: str) -> str:
        return self.get(node_id).state

    def ring_eligible(self) -> frozenset[str]:
        return frozenset(n for n, m in self._members.items()
                         if m.state in RING_ELIGIBLE)

    def lease_holder(self, controller_ids) -> str | None:
        """Lowest-id controller currently in the ring-eligible states."""
        live = [c for c in controller_ids
                if c in self._members
                and self._members[c].state in RING_ELIGIBLE]
        return min(live) if live else None

    # --- mutations ---

    def _bump_if_eligibility_changed(self, before: frozenset[str]) -> bool:
        after = self.ring_eligible()
        if after != before:
            self.epoch += 1
            return True
        return False

    def bootstrap(self, node_ids, now: float) -> int:
        """Seed an empty table with the initial cluster as one epoch step."""
        if self._members:
            raise RuntimeError("bootstrap on a non-empty table")
        for node_id in sorted(node_ids):
            self._members[node_id] = NodeLifecycle(node_id, ACTIVE, now)
        self.epoch += 1
        return self.epoch

    def join(self, node_id: str, now: float) -> int:
        """Admit a node into joining; returns the new epoch. A down or
        removed node rejoins with a bumped incarnation."""
        cur = self._members.get(node_id)
        if cur is not None and cur.state in RING_ELIGIBLE:
            raise DuplicateId(
                f"node {node_id} already {cur.state} "
                f"(incarnation {cur.incarnation})")
        before = self.ring_eligible()
        if cur is None:
            self._members[node_id] = NodeLifecycle(node_id, JOINING, now)
        else:
            cur.state = JOINING
            cur.last_heartbeat = now
            cur.incarnation += 1
        self._bump_if_eligibility_changed(before)
        return self.epoch

    def heartbeat(self, node_id: str, now: float) -> int:
        """Record liveness; a joining node becomes active, a suspect node
        recovers. Returns the current epoch so the sender can refresh its
        ring view."""
        m = self._members.get(node_id)
        if m is None or m.state in (DOWN, REMOVED, PROVISIONED):
            raise UnknownNode(
                f"node {node_id} is not a member; join first")
        m.last_heartbeat = now
        if m.state in (JOINING, SUSPECT):
            m.state = ACTIVE  # same eligibility class: no epoch change
        return self.epoch

    def detect_failures(self, now: float) -> list[StateChange]:
        """Silence of >= 1 interval makes a node suspect, >= 3 makes it
        down. Deterministic given timestamps; down transitions bump the
        epoch (and therefore trigger a rebalance)."""
        before = self.ring_eligible()
        changes = []
        for node_id in sorted(self._members):
            m = self._members[node_id]
            if m.state not in RING_ELIGIBLE:
                continue
            silent = now - m.last_heartbeat
            if silent >= DOWN_AFTER_INTERVALS * self.heartbeat_interval_s:
                changes.append(StateChange(node_id, m.state, DOWN))
                m.state = DOWN
            elif (silent >= SUSPECT_AFTER_INTERVALS * self.heartbeat_interval_s
                  and m.state in (ACTIVE, JOINING)):
                changes.append(StateChange(node_id, m.state, SUSPECT))
                m.state = SUSPECT
        self._bump_if_eligibility_changed(before)
        return changes

    def mark_down(self, node_id: str) -> bool:
        """Externally observed hard failure (power cut, switch loss); skips
        the suspicion ladder."""
        m = self.get(node_id)
        if m.state in (DOWN, REMOVED):
            return False
        before = self.ring_eligible()
        m.state = DOWN
        return self._bump_if_eligibility_changed(before)

    def remove(self, node_id: str) -> int:
        before = self.ring_eligible()
        self.get(node_id).state = REMOVED
        self._bump_if_eligibility_changed(before)
        return self.epoch

    def to_document(self) -> dict:
        return {
            "epoch": self.epoch,
            "members": {
                n: {"state": m.state, "last_heartbeat": m.last_heartbeat,
                    "incarnation": m.incarnation}
                for n, m in sorted(self._members.items())
            },
        }
