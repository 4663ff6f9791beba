"""Per-node metric buffers and whole-cluster snapshots."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .errors import UnknownNode

DEFAULT_BUFFER_SIZE = 10_000


@dataclass(frozen=True)
class MetricSample:
    node_id: str
    ts: float
    cpu_pct: float
    ram_mb_used: float
    io_ops: float
    draw_w: float

    def to_document(self) -> dict:
        return {"node_id": self.node_id, "ts": self.ts,
                "cpu_pct": self.cpu_pct, "ram_mb_used": self.ram_mb_used,
                "io_ops": self.io_ops, "draw_w": self.draw_w}


class Telemetry:
    """Bounded ring buffer per node; one writer (the scrape task piggybacked
    on heartbeats), any number of snapshot readers."""

    def __init__(self, cores_by_node: dict[str, int],
                 buffer_size: int = DEFAULT_BUFFER_SIZE):
        self._cores = dict(cores_by_node)
        self._buffers: dict[str, deque[MetricSample]] = {
            n: deque(maxlen=buffer_size) for n in self._cores}

    def add_node(self, node_id: str, cores: int):
        if node_id not in self._buffers:
            self._cores[node_id] = cores
            self._buffers[node_id] = deque(
                maxlen=next(iter(self._buffers.values())).maxlen
                if self._buffers else DEFAULT_BUFFER_SIZE)

    def record(self, sample: MetricSample):
        buf = self._buffers.get(sample.node_id)
        if buf is None:
            raise UnknownNode(f"unknown node {sample.node_id}")
        if not 0 <= sample.cpu_pct <= 100 * self._cores[sample.node_id]:
            raise ValueError(f"cpu_pct {sample.cpu_pct} out of range")
        if buf and sample.ts < buf[-1].ts:
            raise ValueError(f"timestamp regression for {sample.node_id}")
        buf.append(sample)

    def query(self, node_id: str, t_from: float, t_to: float
              ) -> list[MetricSample]:
        buf = self._buffers.get(node_id)
        if buf is None:
            raise UnknownNode(f"unknown node {node_id}")
        return [s for s in buf if t_from <= s.ts <= t_to]

    def latest(self, node_id: str) -> MetricSample | None:
        buf = self._buffers.get(node_id)
        if buf is None:
            raise UnknownNode(f"unknown node {node_id}")
        return buf[-1] if buf else None

    def sample_count(self, node_id: str) -> int:
        return len(self._buffers[node_id])

    def cluster_snapshot(self, now: float, membership_doc: dict,
                         power_view: dict, sync_view: dict) -> dict:
        """One consistent read: callers capture the membership, power, and
        sync views at a single instant and this stitches them together with
        each node's latest sample."""
        nodes = {}
        for node_id in sorted(self._buffers):
            latest = self.latest(node_id)
            member = membership_doc["members"].get(node_id, {})
            nodes[node_id] = {
                "state": member.get("state", "unknown"),
                "incarnation": member.get("incarnation", 0),
                "metrics": None if latest is None else {
                    "ts": latest.ts,
                    "cpu_pct": latest.cpu_pct,
                    "ram_mb_used": latest.ram_mb_used,
                    "io_ops": latest.io_ops,
                    "draw_w": latest.draw_w,
                },
            }
        return {
            "ts": now,
            "epoch": membership_doc["epoch"],
            "nodes": nodes,
            "power": power_view,
            "sync": sync_view,
        }


def sample_to_document(s: MetricSample) -> dict:
    return {
        "node_id": s.node_id,
        "ts": s.ts,
        "cpu_pct": s.cpu_pct,
        "ram_mb_used": s.ram_mb_used,
        "io_ops": s.io_ops,
        "draw_w": s.draw_w,
    }
