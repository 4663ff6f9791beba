"""Whole-cluster state machine.

One object owns the mutable cluster: topology and scripted faults, PoE
ports and the battery, storage node instances, the membership table, the
ring and its gateways, the upstream relay, and telemetry. The simulator
drives it in virtual time and the HTTP service drives the same object in
wall time; neither owns any cluster logic of its own.

Liveness flows one way: scripted faults plus disabled ports feed the
topology reachability check, which decides who can heartbeat, which
gateways serve, and which replicas are writable. Membership reacts to
missing heartbeats, epoch changes trigger ring rebalances, and rebalances
move data. Power is settled lazily between events at a constant net drain,
so battery figures stay exact piecewise-linear arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Callable

from . import topology as topo
from .errors import (
    NoLiveReplica,
    PortPolicyViolation,
    StaleGateway,
    UnknownComponent,
    UnknownNode,
)
from .membership import MembershipTable, StateChange
from .power import (
    CRITICAL,
    LITHIUM,
    LOW,
    STRESS,
    BatteryBank,
    PoePortState,
    SheddingPolicy,
    active_shed_priorities,
    default_port_states,
    shed,
    step_charge,
    step_discharge,
)
from .relay import OP_DELETE, OP_PUT, Relay, UpstreamLink, UpstreamStub
from .store import (
    Gateway,
    ObjectRecord,
    StorageNode,
    Version,
    apply_move,
    order_key,
    partition_of,
    rebalance,
    ring_build,
    ring_to_document,
)
from .telemetry import MetricSample, Telemetry

RELAY_COMPONENT = "relay"
UPSTREAM_COMPONENT = "upstream"

# Deterministic per-node telemetry figures by workload level.
STRESS_CPU_PCT_PER_CORE = 85.0
IDLE_CPU_PCT = 4.0
STRESS_RAM_MB = 612.0
IDLE_RAM_MB = 96.0
STRESS_IO_OPS = 120.0
IDLE_IO_OPS = 1.0

# Rounding slack when a scheduled threshold crossing lands: the crossing
# time is float arithmetic, so soc arrives within an ulp or two of the
# target, never exactly on it, and thresholds compare inclusively.
CROSSING_SNAP = 1e-9

Tracer = Callable[[float, str, dict], None]


class ClusterRuntime:
    def __init__(self, t: topo.ClusterTopology, *,
                 bank: BatteryBank,
                 policy: SheddingPolicy,
                 heartbeat_interval_s: float = 2.0,
                 partition_count: int = 64,
                 replication_factor: int = 3,
                 queue_cap: int = 10_000,
                 link: UpstreamLink | None = None,
                 port_priorities: dict[str, str] | None = None,
                 charge_w: float = 0.0,
                 ambient_c: float = 20.0,
                 workload_level: str = STRESS,
                 tracer: Tracer | None = None):
        self.topology = t
        self.bank = bank
        self.policy = policy
        self.charge_w = charge_w
        self.ambient_c = ambient_c
        self.workload_level = workload_level
        self._trace = tracer or (lambda now, kind, payload: None)

        self.failed: set[str] = set()
        self.bank_empty = bank.soc <= 0
        self.charge_inhibited = False
        self.power_rev = 0  # bumped whenever the net drain may have changed
        self._last_power_ts = 0.0

        self.ports: dict[str, PoePortState] = {
            p.port_id: p
            for p in default_port_states(t, port_priorities, workload_level)}
        self.storage: dict[str, StorageNode] = {
            n.node_id: StorageNode(n.node_id, n.subcluster_id)
            for n in t.storage_nodes()}

        self.table = MembershipTable(heartbeat_interval_s)
        self.table.bootstrap([n.node_id for n in t.nodes()], 0.0)
        self.partition_count = partition_count
        self.replication_factor = replication_factor
        self.ring = ring_build(t.storage_nodes(), partition_count,
                               replication_factor)
        self.epoch = self.table.epoch

        # Every gateway shares this one live view; _refresh_liveness rebuilds
        # it in place so the shared reference stays valid.
        self.reachable_storage: dict[str, StorageNode] = {}
        self.gateways: dict[str, Gateway] = {
            c.node_id: Gateway(c.node_id, self.ring, self.reachable_storage,
                               self.epoch)
            for c in t.controller_nodes()}

        self.stub = UpstreamStub()
        first_gw = self.gateways[sorted(self.gateways)[0]]
        self.relay = Relay(first_gw, self.stub, link, queue_cap)

        self.telemetry = Telemetry(
            {n.node_id: n.hw_profile.cpu_cores for n in t.nodes()})

        self.op_seq = 0
        self.acked_ledger: list[tuple[str, tuple[int, str, bool], float]] = []
        self.shed_event_count = 0
        self._downtime: dict[str, float] = {}
        self._down_since: dict[str, float] = {}

        self.live_nodes: frozenset[str] = frozenset()
        self._refresh_liveness(0.0)

    # ------------------------------------------------------------------
    # power
    # ------------------------------------------------------------------

    def _effective_failed(self) -> frozenset[str]:
        disabled_ports = {pid for pid, p in self.ports.items()
                          if not p.enabled}
        known = self.topology.component_ids()
        return frozenset((self.failed | disabled_ports) & known)

    def powered_nodes(self) -> set[str]:
        """Nodes whose PoE port is delivering: the port is enabled and
        neither the node, port, shared adapter, nor switch has failed.
        Reachability does not matter; an isolated node still draws."""
        if self.bank_empty:
            return set()
        _adj, node_live = topo._live_graph(self.topology,
                                           self._effective_failed())
        return {n.node_id for n in self.topology.nodes() if node_live(n)}

    def draw_w(self) -> float:
        powered = self.powered_nodes()
        stress = self.workload_level == STRESS
        return math.fsum(
            (n.hw_profile.load_draw_w if stress else n.hw_profile.idle_draw_w)
            for n in self.topology.nodes() if n.node_id in powered)

    def _effective_charge_w(self) -> float:
        if self.charge_w > 0 and self.bank.chemistry == LITHIUM \
                and self.ambient_c < 0:
            return 0.0
        return self.charge_w

    def net_drain_w(self) -> float:
        return self.draw_w() - self._effective_charge_w()

    def advance_power(self, now: float):
        """Settle the battery from the last settlement up to `now` at the
        current constant net drain. Integrating the net in one step keeps a
        heavy draw from falsely bottoming out the bank when charge input
        would have covered part of it."""
        dt_h = (now - self._last_power_ts) / 3600.0
        self._last_power_ts = max(self._last_power_ts, now)
        if dt_h <= 0 or self.bank_empty:
            return
        inhibited = (self.charge_w > 0 and self.bank.chemistry == LITHIUM
                     and self.ambient_c < 0)
        if inhibited and not self.charge_inhibited:
            self._trace(now, "charge_inhibited", {"ambient_c": self.ambient_c})
        self.charge_inhibited = inhibited
        net = self.draw_w() - self._effective_charge_w()
        if net > 0:
            res = step_discharge(self.bank, net, dt_h)
            self.bank = res.bank
            if res.empty:
                self._on_bank_empty(now)
        elif net < 0:
            charged = step_charge(self.bank, -net, dt_h, self.ambient_c)
            self.bank = charged.bank

    def _on_bank_empty(self, now: float):
        self.bank_empty = True
        self.power_rev += 1
        self._trace(now, "bank_empty", {"soc": self.bank.soc})
        self._refresh_liveness(now)

    def next_power_crossing(self, now: float) -> tuple[float, float] | None:
        """Exact time the state of charge next reaches a shed threshold or
        zero at the current net drain; None while not draining."""
        if self.bank_empty:
            return None
        net = self.net_drain_w()
        if net <= 0:
            return None
        soc = self.bank.soc
        if soc <= 0:
            return None
        targets = [f for f, _ in self.policy.thresholds if f < soc]
        target = max(targets) if targets else 0.0
        hours = (soc - target) * self.bank.energy_wh / net
        return (now + hours * 3600.0, target)

    def settle_crossing(self, now: float, target: float):
        """Dispatch point for a crossing computed by next_power_crossing:
        settle, then absorb the float rounding of the round trip through
        the crossing-time formula so the state of charge lands on the
        threshold precisely instead of an ulp to either side."""
        self.advance_power(now)
        if self.bank_empty:
            return
        if abs(self.bank.soc - target) <= CROSSING_SNAP:
            self.bank = replace(self.bank, soc=target)
            if target <= 0.0:
                self._on_bank_empty(now)

    def apply_shedding(self, now: float) -> list[str]:
        """Disable whatever the policy says must shed at the current state
        of charge; victims come back only through an operator re-enable."""
        self.advance_power(now)
        soc = self.bank.soc
        victims = shed(self.policy, list(self.ports.values()), soc)
        floor = None
        for f, _prios in self.policy.thresholds:
            if f >= soc:
                floor = f
        for pid in victims:
            port = self.ports[pid]
            self.ports[pid] = replace(port, enabled=False)
            self.shed_event_count += 1
            self._trace(now, "shed_port", {
                "port": pid, "priority": port.priority,
                "node": port.attached_node, "soc": soc, "threshold": floor})
        if victims:
            self.power_rev += 1
            self._refresh_liveness(now)
        return victims

    def set_port(self, port_id: str, enable: bool, now: float,
                 operator: bool = True) -> dict:
        """Operator port control; the shedding policy keeps the last word."""
        port = self.ports.get(port_id)
        if port is None:
            raise UnknownComponent(f"no such port: {port_id}")
        self.advance_power(now)
        if not enable and port.priority == CRITICAL:
            raise PortPolicyViolation(
                f"port {port_id} is critical and cannot be disabled")
        if enable and port.priority in active_shed_priorities(self.policy,
                                                              self.bank.soc):
            raise PortPolicyViolation(
                f"state of charge {self.bank.soc:.3f} is still at or below "
                f"the shed threshold for {port.priority} ports")
        if port.enabled != enable:
            self.ports[port_id] = replace(port, enabled=enable)
            self.power_rev += 1
            self._trace(now, "port", {"port": port_id, "enabled": enable,
                                      "operator": operator})
            self._refresh_liveness(now)
        return self.port_view(port_id)

    def set_environment(self, now: float, charge_w: float | None = None,
                        ambient_c: float | None = None):
        """Scripted environment change (sunrise, cold snap); settles power
        first so the old conditions integrate up to this instant."""
        self.advance_power(now)
        if charge_w is not None:
            self.charge_w = charge_w
        if ambient_c is not None:
            self.ambient_c = ambient_c
        self.power_rev += 1
        self._trace(now, "environment", {"charge_w": self.charge_w,
                                         "ambient_c": self.ambient_c})

    # ------------------------------------------------------------------
    # faults
    # ------------------------------------------------------------------

    def apply_fault(self, component: str, action: str, now: float,
                    torn: bool = False):
        """Scripted or operator fault. Actions: fail, restore, disk_loss."""
        self.advance_power(now)
        if component == RELAY_COMPONENT:
            if action == "fail":
                self.relay.crash(torn_tail=torn)
                self._mark_down_since(component, now)
            elif action == "restore":
                self.relay.restart()
                self._mark_restored(component, now)
            else:
                raise UnknownComponent(f"relay has no action {action}")
        elif component == UPSTREAM_COMPONENT:
            if action == "fail":
                self.stub.available = False
                self._mark_down_since(component, now)
            elif action == "restore":
                self.stub.available = True
                self._mark_restored(component, now)
            else:
                raise UnknownComponent(f"upstream has no action {action}")
        elif component in self.topology.component_ids():
            if action == "fail":
                self.failed.add(component)
                self._mark_down_since(component, now)
            elif action == "restore":
                self.failed.discard(component)
                self._mark_restored(component, now)
            elif action == "disk_loss":
                self._disk_loss(component, now)
            else:
                raise UnknownComponent(f"unknown fault action {action}")
            self.power_rev += 1
            self._refresh_liveness(now)
        else:
            raise UnknownComponent(f"unknown component {component}")
        self._trace(now, "fault", {"component": component, "action": action})

    def _disk_loss(self, component: str, now: float):
        inst = self.storage.get(component)
        if inst is None:
            raise UnknownComponent(
                f"disk_loss applies to storage nodes, not {component}")
        inst.wipe()
        if component not in self.powered_nodes():
            return  # stays empty until it powers back up and rejoins
        inst.restart()
        # Immediate repair: copy every assigned partition back from a live
        # replica before anything reads from this node again.
        copied = 0
        partitions = 0
        for p, replicas in enumerate(self.ring.assignment):
            if component not in replicas:
                continue
            source = next((r for r in replicas
                           if r != component and r in self.reachable_storage),
                          None)
            if source is None:
                continue
            partitions += 1
            for rec in self.storage[source].records():
                if partition_of(self.ring, rec.key) == p:
                    inst.apply(rec)
                    copied += 1
        self._trace(now, "repair", {"node": component,
                                    "partitions": partitions,
                                    "records": copied})

    def _mark_down_since(self, component: str, now: float):
        self._down_since.setdefault(component, now)

    def _mark_restored(self, component: str, now: float):
        t0 = self._down_since.pop(component, None)
        if t0 is not None:
            self._downtime[component] = self._downtime.get(component, 0.0) \
                + (now - t0)

    def downtime_report(self, end_ts: float) -> dict[str, float]:
        out = dict(self._downtime)
        for component, t0 in self._down_since.items():
            out[component] = out.get(component, 0.0) + max(0.0, end_ts - t0)
        return {k: round(v, 6) for k, v in sorted(out.items())}

    # ------------------------------------------------------------------
    # liveness / membership
    # ------------------------------------------------------------------

    def _refresh_liveness(self, now: float):
        if self.bank_empty:
            live: frozenset[str] = frozenset()
        else:
            eff = self._effective_failed()
            live = topo.survivors(self.topology, eff)
            if not live:
                # fully cut off from the external network: keep serving the
                # local island around the lease-eligible controller
                live = topo.controller_island(self.topology, eff)
        self.live_nodes = live
        powered = self.powered_nodes()
        for node_id, inst in self.storage.items():
            if inst.alive and node_id not in powered:
                inst.crash()
            elif not inst.alive and node_id in powered:
                inst.restart()
        eligible = self.table.ring_eligible()
        self.reachable_storage.clear()
        for node_id, inst in self.storage.items():
            if node_id in live and inst.alive and node_id in eligible:
                self.reachable_storage[node_id] = inst
        self.relay.reachable = self._upstream_path_exists()

    def _upstream_path_exists(self) -> bool:
        lease = self.lease_holder()
        if lease is None:
            return False
        reach = topo.upstream_reachable(self.topology,
                                        self._effective_failed())
        return lease in reach

    def lease_holder(self) -> str | None:
        ctls = [c.node_id for c in self.topology.controller_nodes()
                if c.node_id in self.live_nodes]
        return self.table.lease_holder(ctls)

    def heartbeat_round(self, now: float) -> list[StateChange]:
        """One scrape-and-detect round: every reachable node heartbeats and
        reports metrics, then failure detection and any resulting rebalance
        run. A live controller can always (re)join itself, so the round
        proceeds whenever any controller is up even if none is eligible."""
        self.advance_power(now)
        if not self.live_gateway_ids():
            return []
        for node_id in sorted(self.live_nodes):
            self.node_heartbeat(node_id, now)
        changes = self.table.detect_failures(now)
        for c in changes:
            self._trace(now, "membership", {
                "node": c.node_id, "from": c.old_state, "to": c.new_state})
        if changes:
            self._maybe_rebalance(now)
        return changes

    def node_heartbeat(self, node_id: str, now: float):
        """One node phones in. A node the table no longer knows (powered
        back up after being marked down) rejoins first and syncs its
        partitions before it serves anything."""
        self.topology.node(node_id)
        try:
            self.table.heartbeat(node_id, now)
        except UnknownNode:
            self.node_join(node_id, now)
        self._record_metrics(node_id, now)

    def node_join(self, node_id: str, now: float):
        """Explicit join of a topology-defined node, with the rebalance the
        epoch bump owes."""
        self.topology.node(node_id)
        self.table.join(node_id, now)
        self._trace(now, "join", {
            "node": node_id,
            "incarnation": self.table.get(node_id).incarnation})
        self._maybe_rebalance(now)

    def _maybe_rebalance(self, now: float):
        """Pair every epoch change with exactly one ring rebalance."""
        if self.table.epoch == self.epoch:
            return
        eligible = self.table.ring_eligible()
        specs = [n for n in self.topology.storage_nodes()
                 if n.node_id in eligible]
        moved_records = 0
        task_count = 0
        if specs:
            new_ring, tasks = rebalance(self.ring, specs)
            for task in tasks:
                moved_records += apply_move(new_ring, task, self.storage)
            task_count = len(tasks)
            self.ring = new_ring
        self.epoch = self.table.epoch
        for gw in self.gateways.values():
            gw.refresh(self.ring, self.epoch)
        self._refresh_liveness(now)
        self._trace(now, "rebalance", {
            "epoch": self.epoch, "tasks": task_count,
            "records_moved": moved_records, "ring_nodes": len(specs)})

    def _record_metrics(self, node_id: str, now: float):
        hw = self.topology.node(node_id).hw_profile
        stress = self.workload_level == STRESS
        self.telemetry.record(MetricSample(
            node_id=node_id, ts=now,
            cpu_pct=(STRESS_CPU_PCT_PER_CORE * hw.cpu_cores if stress
                     else IDLE_CPU_PCT),
            ram_mb_used=STRESS_RAM_MB if stress else IDLE_RAM_MB,
            io_ops=STRESS_IO_OPS if stress else IDLE_IO_OPS,
            draw_w=hw.load_draw_w if stress else hw.idle_draw_w))

    # ------------------------------------------------------------------
    # client operations
    # ------------------------------------------------------------------

    def live_gateway_ids(self) -> list[str]:
        return sorted(c.node_id for c in self.topology.controller_nodes()
                      if c.node_id in self.live_nodes)

    def _pick_gateway(self) -> Gateway:
        gws = self.live_gateway_ids()
        if not gws:
            raise NoLiveReplica("no live gateway")
        return self.gateways[gws[self.op_seq % len(gws)]]

    def _with_refresh(self, gw: Gateway, fn):
        try:
            return fn()
        except StaleGateway:
            gw.refresh(self.ring, self.epoch)
            return fn()

    def client_put(self, key: str, value: bytes, now: float) -> Version:
        self.op_seq += 1
        gw = self._pick_gateway()
        self.relay.check_capacity()
        version = self._with_refresh(gw, lambda: gw.put(key, value, self.epoch))
        self.relay.enqueue(OP_PUT, key, version, value, now)
        self.acked_ledger.append(
            (key, (version.counter, version.origin, False), now))
        return version

    def client_delete(self, key: str, now: float) -> Version:
        self.op_seq += 1
        gw = self._pick_gateway()
        self.relay.check_capacity()
        version = self._with_refresh(gw, lambda: gw.delete(key, self.epoch))
        self.relay.enqueue(OP_DELETE, key, version, b"", now)
        self.acked_ledger.append(
            (key, (version.counter, version.origin, True), now))
        return version

    def client_get(self, key: str, now: float) -> ObjectRecord:
        self.op_seq += 1
        gw = self._pick_gateway()
        return self._with_refresh(gw, lambda: gw.get(key, self.epoch))

    # ------------------------------------------------------------------
    # scale-out
    # ------------------------------------------------------------------

    def add_subcluster(self, index: int, attach_to: str, now: float,
                       controllers: int = 2, storage: int = 5) -> list[str]:
        """Chain a new box onto a live switch and fold its nodes in."""
        self.advance_power(now)
        sub = topo.make_subcluster(index, controllers, storage)
        self.topology = topo.scale_out(self.topology, sub, attach_to)
        stress = self.workload_level == STRESS
        new_ids = []
        for n in sub.nodes:
            new_ids.append(n.node_id)
            prio = CRITICAL if n.role == topo.CONTROLLER else LOW
            draw = (n.hw_profile.load_draw_w if stress
                    else n.hw_profile.idle_draw_w)
            self.ports[n.port_id] = PoePortState(n.port_id, n.node_id, prio,
                                                 True, draw)
            self.telemetry.add_node(n.node_id, n.hw_profile.cpu_cores)
            if n.role == topo.STORAGE:
                self.storage[n.node_id] = StorageNode(n.node_id,
                                                      n.subcluster_id)
            else:
                self.gateways[n.node_id] = Gateway(
                    n.node_id, self.ring, self.reachable_storage, self.epoch)
        self.power_rev += 1
        self._refresh_liveness(now)
        self._trace(now, "scale_out", {
            "subcluster": sub.subcluster_id, "attach_to": attach_to,
            "nodes": sorted(new_ids)})
        if self.live_gateway_ids():
            for node_id in sorted(new_ids):
                self.table.join(node_id, now)
                self._trace(now, "join", {"node": node_id, "incarnation": 1})
                self._maybe_rebalance(now)
        return new_ids

    # ------------------------------------------------------------------
    # views
    # ------------------------------------------------------------------

    def port_view(self, port_id: str) -> dict:
        p = self.ports[port_id]
        return {"port_id": p.port_id, "attached_node": p.attached_node,
                "priority": p.priority, "enabled": p.enabled,
                "draw_w": p.effective_draw_w}

    def power_view(self) -> dict:
        return {
            "soc": self.bank.soc,
            "capacity_ah": self.bank.capacity_ah,
            "voltage_v": self.bank.voltage_v,
            "chemistry": self.bank.chemistry,
            "max_dod": self.bank.max_dod,
            "draw_w": self.draw_w(),
            "charge_w": self.charge_w,
            "ambient_c": self.ambient_c,
            "flags": {"charge_inhibited": self.charge_inhibited,
                      "bank_empty": self.bank_empty},
            "thresholds": [[f, sorted(p)] for f, p in self.policy.thresholds],
            "ports": [self.port_view(pid) for pid in sorted(self.ports)],
        }

    def ring_view(self) -> dict:
        doc = ring_to_document(self.ring)
        doc["epoch"] = self.epoch
        return doc

    def members_view(self) -> dict:
        return self.table.to_document()

    def topology_view(self) -> dict:
        doc = topo.to_document(self.topology)
        doc["failed"] = sorted(self.failed)
        doc["live_nodes"] = sorted(self.live_nodes)
        return doc

    def sync_view(self, now: float) -> dict:
        return self.relay.stats(now)

    def snapshot(self, now: float) -> dict:
        return self.telemetry.cluster_snapshot(
            now, self.members_view(),
            {"soc": self.bank.soc, "draw_w": self.draw_w(),
             "flags": {"charge_inhibited": self.charge_inhibited,
                       "bank_empty": self.bank_empty}},
            self.sync_view(now))

    # ------------------------------------------------------------------
    # audit support
    # ------------------------------------------------------------------

    def final_version_map(self) -> dict[str, tuple[int, str, bool]]:
        """Ground truth at end of run: newest record per key over all live
        storage nodes."""
        out: dict[str, tuple[int, str, bool]] = {}
        for inst in self.storage.values():
            if not inst.alive:
                continue
            for rec in inst.records():
                key = rec.key.decode("utf-8", "replace")
                ok = order_key(rec)
                if key not in out or ok > out[key]:
                    out[key] = ok
        return out
