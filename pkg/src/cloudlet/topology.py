"""Cluster structure: subclusters, switches, ports, uplinks, nodes.

Everything here is an immutable value. Operations are pure functions, so
the same topology object can be shared by the simulator, the service and
any number of threads. Component failures are expressed as a set of
failed component ids handed to :func:`survivors`; nothing in this module
tracks health state.

Component ids that can appear in a failure set:

* switches        ``switch_1``
* nodes           ``sub_1_ctl_1``, ``sub_1_sto_3``
* ports           ``switch_1_p4``
* interconnects   ``link_switch_1_switch_2``  (switch-to-switch uplink)
* upstream links  ``uplink_switch_1``         (switch to external network)
* PoE adapters    ``adapter_sub_1``           (shared by a subcluster's controllers)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .errors import NoFreeUplink, UnknownComponent, ValidationError

CONTROLLER = "controller"
STORAGE = "storage"

# External network vertex used for upstream reachability.
EXTERNAL = "ext"

# Per-node stress draw calibrated so one full 7-node subcluster (switch
# draw folded in) totals 48 W and the default two-subcluster cluster 96 W.
SUBCLUSTER_STRESS_W = 48.0
STRESS_DRAW_PER_NODE_W = SUBCLUSTER_STRESS_W / 7.0


@dataclass(frozen=True)
class HwProfile:
    """Per-board hardware figures used by the power model."""

    cpu_cores: int = 4
    ram_mb: int = 1024
    idle_draw_w: float = 3.0
    load_draw_w: float = STRESS_DRAW_PER_NODE_W
    unit_cost_usd: float = 35.0

    def __post_init__(self):
        if self.cpu_cores < 1:
            raise ValueError("cpu_cores must be >= 1")
        if not (0 < self.idle_draw_w <= self.load_draw_w):
            raise ValueError("draw must satisfy 0 < idle_draw_w <= load_draw_w")


# RPi 2 model B: quad-core ARMv7, 1 GB RAM, ~$35.
RPI2_PROFILE = HwProfile()
# RPi B+: cheaper and lower draw, at reduced performance.
RPI_BPLUS_PROFILE = HwProfile(cpu_cores=1, ram_mb=512, idle_draw_w=2.0,
                              load_draw_w=5.0, unit_cost_usd=25.0)


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    role: str  # CONTROLLER | STORAGE
    subcluster_id: str
    port_id: str
    hw_profile: HwProfile = RPI2_PROFILE

    def __post_init__(self):
        if self.role not in (CONTROLLER, STORAGE):
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class SwitchSpec:
    switch_id: str
    data_ports: int = 8
    uplink_ports: int = 2
    poe_capable: bool = True

    def __post_init__(self):
        if self.data_ports < 1 or self.uplink_ports < 1:
            raise ValueError("switch needs at least one data and one uplink port")


@dataclass(frozen=True)
class SubclusterSpec:
    subcluster_id: str
    switch: SwitchSpec
    nodes: tuple[NodeSpec, ...]


@dataclass(frozen=True)
class ClusterTopology:
    subclusters: tuple[SubclusterSpec, ...]
    # Switch-to-switch links; these consume uplink ports on both ends.
    interconnects: tuple[tuple[str, str], ...]
    # Switch-to-external links; ride the switch's WAN port, not an uplink port.
    upstream_links: tuple[str, ...]
    # Shared PoE adapters: failing one fails every port behind it.
    poe_adapters: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def nodes(self) -> tuple[NodeSpec, ...]:
        return tuple(n for sc in self.subclusters for n in sc.nodes)

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes():
            if n.node_id == node_id:
                return n
        raise UnknownComponent(f"no such node: {node_id}")

    def storage_nodes(self) -> tuple[NodeSpec, ...]:
        return tuple(n for n in self.nodes() if n.role == STORAGE)

    def controller_nodes(self) -> tuple[NodeSpec, ...]:
        return tuple(n for n in self.nodes() if n.role == CONTROLLER)

    def switch_of(self, node: NodeSpec) -> str:
        for sc in self.subclusters:
            if sc.subcluster_id == node.subcluster_id:
                return sc.switch.switch_id
        raise UnknownComponent(f"node {node.node_id} has no subcluster")

    def component_ids(self) -> frozenset[str]:
        ids: set[str] = set()
        for sc in self.subclusters:
            ids.add(sc.switch.switch_id)
            for n in sc.nodes:
                ids.add(n.node_id)
                ids.add(n.port_id)
        for a, b in self.interconnects:
            ids.add(interconnect_id(a, b))
        for sw in self.upstream_links:
            ids.add(upstream_id(sw))
        ids.update(self.poe_adapters)
        return frozenset(ids)


@dataclass(frozen=True)
class Violation:
    code: str
    subject: str
    detail: str


def interconnect_id(a: str, b: str) -> str:
    lo, hi = sorted((a, b))
    return f"link_{lo}_{hi}"


def upstream_id(switch_id: str) -> str:
    return f"uplink_{switch_id}"


def adapter_id(subcluster_id: str) -> str:
    return f"adapter_{subcluster_id}"


def make_subcluster(index: int, controllers: int = 2, storage: int = 5,
                    profile: HwProfile = RPI2_PROFILE,
                    switch: SwitchSpec | None = None) -> SubclusterSpec:
    """Build one box: a switch plus controller and storage boards on its ports."""
    sub_id = f"sub_{index}"
    sw = switch or SwitchSpec(switch_id=f"switch_{index}")
    nodes = []
    port = 0
    for i in range(1, controllers + 1):
        port += 1
        nodes.append(NodeSpec(f"{sub_id}_ctl_{i}", CONTROLLER, sub_id,
                              f"{sw.switch_id}_p{port}", profile))
    for i in range(1, storage + 1):
        port += 1
        nodes.append(NodeSpec(f"{sub_id}_sto_{i}", STORAGE, sub_id,
                              f"{sw.switch_id}_p{port}", profile))
    return SubclusterSpec(sub_id, sw, tuple(nodes))


def _controller_adapters(subclusters) -> dict[str, tuple[str, ...]]:
    adapters = {}
    for sc in subclusters:
        ctl_ports = tuple(n.port_id for n in sc.nodes if n.role == CONTROLLER)
        if len(ctl_ports) >= 2:
            adapters[adapter_id(sc.subcluster_id)] = ctl_ports
    return adapters


def build_default_topology() -> ClusterTopology:
    """Two cross-linked subclusters of 2 controllers + 5 storage nodes each,
    both switches uplinked to the external network."""
    sub1 = make_subcluster(1)
    sub2 = make_subcluster(2)
    return ClusterTopology(
        subclusters=(sub1, sub2),
        interconnects=((sub1.switch.switch_id, sub2.switch.switch_id),),
        upstream_links=(sub1.switch.switch_id, sub2.switch.switch_id),
        poe_adapters=_controller_adapters((sub1, sub2)),
    )


def validate(t: ClusterTopology) -> list[Violation]:
    """Check structural invariants; an empty list means the topology is valid."""
    out: list[Violation] = []
    seen_subs: set[str] = set()
    seen_switches: set[str] = set()
    seen_nodes: set[str] = set()
    seen_ports: set[str] = set()

    for sc in t.subclusters:
        if sc.subcluster_id in seen_subs:
            out.append(Violation("DUPLICATE_SUBCLUSTER_ID", sc.subcluster_id,
                                 "subcluster id reused"))
        seen_subs.add(sc.subcluster_id)
        if sc.switch.switch_id in seen_switches:
            out.append(Violation("DUPLICATE_SWITCH_ID", sc.switch.switch_id,
                                 "switch id reused"))
        seen_switches.add(sc.switch.switch_id)

        roles = [n.role for n in sc.nodes]
        if CONTROLLER not in roles:
            out.append(Violation("MISSING_CONTROLLER", sc.subcluster_id,
                                 "subcluster has no controller node"))
        if STORAGE not in roles:
            out.append(Violation("MISSING_STORAGE", sc.subcluster_id,
                                 "subcluster has no storage node"))
        if len(sc.nodes) > sc.switch.data_ports:
            out.append(Violation(
                "PORT_OVERFLOW", sc.subcluster_id,
                f"{len(sc.nodes)} nodes on a {sc.switch.data_ports}-port switch"))

        for n in sc.nodes:
            if n.node_id in seen_nodes:
                out.append(Violation("DUPLICATE_NODE_ID", n.node_id, "node id reused"))
            seen_nodes.add(n.node_id)
            if n.port_id in seen_ports:
                out.append(Violation("DUPLICATE_PORT", n.port_id,
                                     "two nodes attached to one port"))
            seen_ports.add(n.port_id)
            if n.subcluster_id != sc.subcluster_id:
                out.append(Violation("WRONG_SUBCLUSTER", n.node_id,
                                     "node lists a different subcluster"))

    for a, b in t.interconnects:
        for sw in (a, b):
            if sw not in seen_switches:
                out.append(Violation("UNKNOWN_SWITCH", sw,
                                     "interconnect references unknown switch"))
    for sw in t.upstream_links:
        if sw not in seen_switches:
            out.append(Violation("UNKNOWN_SWITCH", sw,
                                 "upstream link references unknown switch"))
    # Uplink port budget: interconnects consume one uplink port per end.
    for sc in t.subclusters:
        used = sum(1 for a, b in t.interconnects
                   if sc.switch.switch_id in (a, b))
        if used > sc.switch.uplink_ports:
            out.append(Violation("UPLINK_OVERFLOW", sc.switch.switch_id,
                                 f"{used} interconnects on "
                                 f"{sc.switch.uplink_ports} uplink ports"))
    if out:
        # Structural problems make the reachability checks meaningless.
        return out

    # Healthy-state connectivity over the switch/external graph.
    all_nodes = {n.node_id for n in t.nodes()}
    if survivors(t, frozenset()) != all_nodes:
        out.append(Violation("NOT_CONNECTED", "-",
                             "healthy topology does not reach every node"))

    # Exhaustive single-component failure enumeration: some storage must
    # survive every individual failure.
    storage = {n.node_id for n in t.storage_nodes()}
    for comp in sorted(t.component_ids()):
        if not (survivors(t, frozenset({comp})) & storage):
            out.append(Violation("SINGLE_POINT_OF_FAILURE", comp,
                                 "this single failure disconnects all storage"))
    return out


def _live_graph(t: ClusterTopology, failed: frozenset[str]):
    """Adjacency over live switches plus the external vertex, and the
    per-node liveness predicate, for a given failure set."""
    unknown = failed - t.component_ids()
    if unknown:
        raise UnknownComponent(f"unknown component ids: {sorted(unknown)}")

    dead_ports = {p for a in failed & t.poe_adapters.keys()
                  for p in t.poe_adapters[a]}
    live_switches = {sc.switch.switch_id for sc in t.subclusters
                     if sc.switch.switch_id not in failed}

    adj: dict[str, set[str]] = {sw: set() for sw in live_switches}
    adj[EXTERNAL] = set()
    for a, b in t.interconnects:
        if interconnect_id(a, b) not in failed and a in live_switches and b in live_switches:
            adj[a].add(b)
            adj[b].add(a)
    for sw in t.upstream_links:
        if upstream_id(sw) not in failed and sw in live_switches:
            adj[sw].add(EXTERNAL)
            adj[EXTERNAL].add(sw)

    def node_live(n: NodeSpec) -> bool:
        return (n.node_id not in failed and n.port_id not in failed
                and n.port_id not in dead_ports
                and t.switch_of(n) in live_switches)

    return adj, node_live


def _reach(adj: dict[str, set[str]], roots: set[str]) -> set[str]:
    seen: set[str] = set()
    stack = sorted(roots)
    while stack:
        v = stack.pop()
        if v in seen:
            continue
        seen.add(v)
        stack.extend(adj[v] - seen)
    return seen


def survivors(t: ClusterTopology, failed: frozenset[str] | set[str]) -> frozenset[str]:
    """Node ids that can still serve, given the failed component set.

    A node is live when itself, its port, its shared PoE adapter and its
    switch are all unfailed; reachability then runs over live switches,
    live interconnects and live upstream links (the external network acts
    as a transit vertex between upstream-linked switches).

    Clients enter through the external network when the topology has
    upstream links, so serving means reachable from there; an islanded
    subcluster with no upstream path is cut off from clients even if its
    own controllers are up. Purely local topologies (no upstream links by
    construction) are instead rooted at their live controllers.
    """
    failed = frozenset(failed)
    adj, node_live = _live_graph(t, failed)

    if t.upstream_links:
        roots = {EXTERNAL} if adj[EXTERNAL] else set()
    else:
        roots = {t.switch_of(n) for n in t.controller_nodes() if node_live(n)}

    reachable = _reach(adj, roots)
    return frozenset(n.node_id for n in t.nodes()
                     if node_live(n) and t.switch_of(n) in reachable)


def upstream_reachable(t: ClusterTopology, failed: frozenset[str] | set[str]) -> frozenset[str]:
    """Node ids with a live path to the external network (cloud side only).

    A cluster partitioned from the cloud keeps serving locally, so this is
    tracked separately from :func:`survivors`.
    """
    failed = frozenset(failed)
    adj, node_live = _live_graph(t, failed)
    reachable = _reach(adj, {EXTERNAL} if adj[EXTERNAL] else set())
    return frozenset(n.node_id for n in t.nodes()
                     if node_live(n) and t.switch_of(n) in reachable)


def controller_island(t: ClusterTopology, failed: frozenset[str] | set[str]) -> frozenset[str]:
    """Serving fallback when no upstream path exists at all: the connected
    component around the lowest-id live controller keeps serving its local
    clients. One island only, so two surviving fragments never both accept
    writes."""
    failed = frozenset(failed)
    adj, node_live = _live_graph(t, failed)
    ctls = sorted(n.node_id for n in t.controller_nodes() if node_live(n))
    if not ctls:
        return frozenset()
    root = t.switch_of(t.node(ctls[0]))
    reachable = _reach(adj, {root})
    return frozenset(n.node_id for n in t.nodes()
                     if node_live(n) and t.switch_of(n) in reachable)


def scale_out(t: ClusterTopology, new_sub: SubclusterSpec, attach_to: str) -> ClusterTopology:
    """Chain a new subcluster onto an existing switch via a free uplink port.

    Returns a new topology; the input is never modified.
    """
    switches = {sc.switch.switch_id for sc in t.subclusters}
    if attach_to not in switches:
        raise UnknownComponent(f"no such switch: {attach_to}")
    used = sum(1 for a, b in t.interconnects if attach_to in (a, b))
    target = next(sc.switch for sc in t.subclusters
                  if sc.switch.switch_id == attach_to)
    if used >= target.uplink_ports:
        raise NoFreeUplink(f"{attach_to} has all {target.uplink_ports} uplink ports in use")

    adapters = dict(t.poe_adapters)
    adapters.update(_controller_adapters((new_sub,)))
    grown = replace(
        t,
        subclusters=t.subclusters + (new_sub,),
        interconnects=t.interconnects + ((attach_to, new_sub.switch.switch_id),),
        poe_adapters=adapters,
    )
    problems = validate(grown)
    if problems:
        raise ValidationError(
            f"scale_out would produce an invalid topology: {problems[0].code}",
            locations=[f"{v.code}:{v.subject}" for v in problems])
    return grown


def to_document(t: ClusterTopology) -> dict:
    """Plain-dict form with deterministic content, for JSON embedding."""
    return {
        "subclusters": [
            {
                "subcluster_id": sc.subcluster_id,
                "switch": {
                    "switch_id": sc.switch.switch_id,
                    "data_ports": sc.switch.data_ports,
                    "uplink_ports": sc.switch.uplink_ports,
                    "poe_capable": sc.switch.poe_capable,
                },
                "nodes": [
                    {
                        "node_id": n.node_id,
                        "role": n.role,
                        "subcluster_id": n.subcluster_id,
                        "port_id": n.port_id,
                        "hw_profile": {
                            "cpu_cores": n.hw_profile.cpu_cores,
                            "ram_mb": n.hw_profile.ram_mb,
                            "idle_draw_w": n.hw_profile.idle_draw_w,
                            "load_draw_w": n.hw_profile.load_draw_w,
                            "unit_cost_usd": n.hw_profile.unit_cost_usd,
                        },
                    }
                    for n in sc.nodes
                ],
            }
            for sc in t.subclusters
        ],
        "interconnects": [list(link) for link in t.interconnects],
        "upstream_links": list(t.upstream_links),
        "poe_adapters": {k: list(v) for k, v in sorted(t.poe_adapters.items())},
    }


def from_document(doc: dict) -> ClusterTopology:
    subclusters = []
    for sc in doc["subclusters"]:
        sw = SwitchSpec(
            switch_id=sc["switch"]["switch_id"],
            data_ports=sc["switch"].get("data_ports", 8),
            uplink_ports=sc["switch"].get("uplink_ports", 2),
            poe_capable=sc["switch"].get("poe_capable", True),
        )
        nodes = tuple(
            NodeSpec(
                node_id=n["node_id"],
                role=n["role"],
                subcluster_id=n["subcluster_id"],
                port_id=n["port_id"],
                hw_profile=HwProfile(**n["hw_profile"]) if "hw_profile" in n else RPI2_PROFILE,
            )
            for n in sc["nodes"]
        )
        subclusters.append(SubclusterSpec(sc["subcluster_id"], sw, nodes))
    return ClusterTopology(
        subclusters=tuple(subclusters),
        interconnects=tuple((a, b) for a, b in doc.get("interconnects", [])),
        upstream_links=tuple(doc.get("upstream_links", [])),
        poe_adapters={k: tuple(v) for k, v in doc.get("poe_adapters", {}).items()},
    )


def canonical_json(doc: dict) -> str:
    """Stable-key-order JSON used everywhere a document is compared by bytes."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))
