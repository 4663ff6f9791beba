"""Deterministic discrete-event harness.

Runs the whole cluster in virtual time under a scripted workload and fault
schedule. One heap, ties broken by (ts, insertion seq); every random draw
comes from a named substream of the scenario seed, so one (scenario, seed)
pair always produces byte-identical canonical traces.

Scenario files are YAML (JSON parses as YAML). The trace serializes as
newline-delimited JSON with sorted keys, and the end-of-run audit replays
the acked-write ledger against the surviving replicas and the upstream
stub to compute the report.
"""

from __future__ import annotations

import hashlib
import heapq
import importlib.resources
import json
import random
from dataclasses import dataclass, field
from typing import IO, Iterator

import yaml

from . import topology as topo
from .errors import CloudletError, NotFound, ParseError, ValidationError
from .power import (
    CHEMISTRIES,
    DEFAULT_POLICY,
    IDLE,
    PRIORITY_ORDER,
    STRESS,
    BatteryBank,
    SheddingPolicy,
)
from .relay import DOWN, UpstreamLink
from .runtime import ClusterRuntime

DRAIN_INTERVAL_S = 1.0
DRAIN_BATCH = 64
KEY_PREFIX = "k"

OP_KINDS = ("put", "get", "delete")
FAULT_ACTIONS = ("fail", "restore", "disk_loss")
PSEUDO_COMPONENTS = ("relay", "upstream")


# ----------------------------------------------------------------------
# scenario model
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class WorkloadOp:
    at: float
    op: str
    key: str
    value: str = ""


@dataclass(frozen=True)
class WorkloadGen:
    start: float
    rate_hz: float
    count: int | None
    stop: float | None
    keys: int
    value_bytes: int
    ops: tuple[str, ...]
    stream: str


@dataclass(frozen=True)
class FaultEvent:
    at: float
    action: str
    component: str | None = None
    torn: bool = False
    charge_w: float | None = None
    ambient_c: float | None = None
    index: int | None = None
    attach_to: str | None = None


@dataclass(frozen=True)
class Scenario:
    name: str
    topology: topo.ClusterTopology
    duration_s: float
    seed: int
    bank: BatteryBank
    policy: SheddingPolicy
    heartbeat_interval_s: float = 2.0
    partition_count: int = 64
    replication_factor: int = 3
    queue_cap: int = 10_000
    workload_level: str = STRESS
    charge_w: float = 0.0
    ambient_c: float = 20.0
    port_priorities: dict[str, str] = field(default_factory=dict)
    link: UpstreamLink = field(default_factory=UpstreamLink)
    workload: tuple[WorkloadOp | WorkloadGen, ...] = ()
    faults: tuple[FaultEvent, ...] = ()


class _Collector:
    """Accumulates ValidationError locations so one load reports them all."""

    def __init__(self):
        self.locations: list[str] = []
        self._details: list[str] = []

    def add(self, location: str, detail: str | None = None):
        self.locations.append(location)
        self._details.append(
            f"{location} ({detail})" if detail else location)

    def raise_if_any(self):
        if self.locations:
            raise ValidationError(
                "invalid scenario: " + ", ".join(self._details),
                locations=self.locations)


def _number(doc, key, errors, loc, default=None, minimum=None):
    value = doc.get(key, default)
    if value is None:
        errors.add(loc)
        return default
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        errors.add(loc)
        return default
    if minimum is not None and value < minimum:
        errors.add(loc)
        return default
    return value


def _build_topology(doc, errors) -> topo.ClusterTopology:
    spec = doc.get("topology", "default")
    if spec == "default":
        return topo.build_default_topology()
    if not isinstance(spec, dict):
        errors.add("topology")
        return topo.build_default_topology()
    try:
        t = topo.from_document(spec)
    except (CloudletError, KeyError, TypeError, ValueError):
        errors.add("topology")
        return topo.build_default_topology()
    violations = topo.validate(t)
    if violations:
        for v in violations:
            errors.add(f"topology.{v.subject}")
        return topo.build_default_topology()
    return t


def _build_power(doc, errors) -> tuple[BatteryBank, SheddingPolicy, dict]:
    power = doc.get("power", {}) or {}
    if not isinstance(power, dict):
        errors.add("power")
        power = {}
    kwargs = {}
    for name in ("cell_count",):
        if name in power:
            kwargs[name] = _number(power, name, errors, f"power.{name}",
                                   minimum=1)
    for name in ("cell_voltage_v", "capacity_ah"):
        if name in power:
            kwargs[name] = _number(power, name, errors, f"power.{name}",
                                   minimum=1e-9)
    for name in ("soc", "max_dod"):
        if name in power:
            kwargs[name] = _number(power, name, errors, f"power.{name}",
                                   minimum=0.0)
    if "chemistry" in power:
        if power["chemistry"] not in CHEMISTRIES:
            errors.add("power.chemistry",
                       f"unknown chemistry: {power['chemistry']!r}")
        else:
            kwargs["chemistry"] = power["chemistry"]
    try:
        bank = BatteryBank(**{k: v for k, v in kwargs.items()
                              if v is not None})
    except (TypeError, ValueError):
        errors.add("power")
        bank = BatteryBank()

    policy = DEFAULT_POLICY
    if "policy" in power:
        try:
            policy = SheddingPolicy(tuple(
                (float(floor), frozenset(prios))
                for floor, prios in power["policy"]))
        except (TypeError, ValueError):
            errors.add("power.policy")

    priorities = power.get("port_priorities", {}) or {}
    if not isinstance(priorities, dict):
        errors.add("power.port_priorities")
        priorities = {}
    for port, prio in priorities.items():
        if prio not in PRIORITY_ORDER:
            errors.add(f"power.port_priorities.{port}")
    return bank, policy, dict(priorities)


def _build_workload(doc, duration, errors):
    out = []
    entries = doc.get("workload", []) or []
    if not isinstance(entries, list):
        errors.add("workload")
        return ()
    for i, e in enumerate(entries):
        loc = f"workload[{i}]"
        if not isinstance(e, dict):
            errors.add(loc)
            continue
        kind = e.get("kind")
        if kind in OP_KINDS:
            at = _number(e, "at", errors, f"{loc}.at", minimum=0.0)
            key = e.get("key")
            if not isinstance(key, str) or not key:
                errors.add(f"{loc}.key")
                continue
            if at is None:
                continue
            if at > duration:
                errors.add(f"{loc}.at")
                continue
            out.append(WorkloadOp(float(at), kind, key,
                                  str(e.get("value", ""))))
        elif kind == "generator":
            start = _number(e, "start", errors, f"{loc}.start",
                            default=0.0, minimum=0.0)
            rate = _number(e, "rate_hz", errors, f"{loc}.rate_hz",
                           minimum=1e-9)
            if start is None or rate is None:
                continue
            if start > duration:
                errors.add(f"{loc}.start")
                continue
            count = e.get("count")
            if count is not None and (not isinstance(count, int)
                                      or count < 0):
                errors.add(f"{loc}.count")
                continue
            stop = e.get("stop")
            if stop is not None and (not isinstance(stop, (int, float))
                                     or stop < start):
                errors.add(f"{loc}.stop")
                continue
            ops = tuple(e.get("ops", ("put",)))
            if not ops or any(op not in OP_KINDS for op in ops):
                errors.add(f"{loc}.ops")
                continue
            keys = e.get("keys", 32)
            vbytes = e.get("value_bytes", 64)
            if not isinstance(keys, int) or keys < 1:
                errors.add(f"{loc}.keys")
                continue
            if not isinstance(vbytes, int) or vbytes < 0:
                errors.add(f"{loc}.value_bytes")
                continue
            out.append(WorkloadGen(
                float(start), float(rate), count,
                None if stop is None else float(stop),
                keys, vbytes, ops, str(e.get("stream", f"gen{i}"))))
        else:
            errors.add(f"{loc}.kind")
    return tuple(out)


def _build_faults(doc, duration, t, errors):
    out = []
    entries = doc.get("faults", []) or []
    if not isinstance(entries, list):
        errors.add("faults")
        return ()
    component_ids = t.component_ids()
    switch_ids = {sc.switch.switch_id for sc in t.subclusters}
    for i, e in enumerate(entries):
        loc = f"faults[{i}]"
        if not isinstance(e, dict):
            errors.add(loc)
            continue
        at = _number(e, "at", errors, f"{loc}.at", minimum=0.0)
        if at is None:
            continue
        if at > duration:
            errors.add(f"{loc}.at")
            continue
        action = e.get("action")
        if action in FAULT_ACTIONS:
            component = e.get("component")
            if component not in component_ids \
                    and component not in PSEUDO_COMPONENTS:
                errors.add(f"{loc}.component", f"no such component: "
                                               f"{component!r}")
                continue
            out.append(FaultEvent(float(at), action, component,
                                  torn=bool(e.get("torn", False))))
        elif action == "set_environment":
            charge = e.get("charge_w")
            ambient = e.get("ambient_c")
            if charge is None and ambient is None:
                errors.add(loc)
                continue
            out.append(FaultEvent(float(at), action,
                                  charge_w=charge, ambient_c=ambient))
        elif action == "add_subcluster":
            index = e.get("index")
            attach = e.get("attach_to")
            if not isinstance(index, int) or index < 1:
                errors.add(f"{loc}.index")
                continue
            if attach not in switch_ids:
                errors.add(f"{loc}.attach_to", f"not a switch: {attach!r}")
                continue
            out.append(FaultEvent(float(at), action,
                                  index=index, attach_to=attach))
        else:
            errors.add(f"{loc}.action")
    return tuple(out)


def build_scenario(doc: dict) -> Scenario:
    """Validate a parsed scenario document; raises ValidationError carrying
    every bad field location at once."""
    if not isinstance(doc, dict):
        raise ValidationError("scenario document must be a mapping",
                              locations=["<root>"])
    errors = _Collector()

    name = doc.get("name", "scenario")
    if not isinstance(name, str) or not name:
        errors.add("name")
        name = "scenario"
    duration = _number(doc, "duration_s", errors, "duration_s", minimum=0.0)
    if duration is None:
        duration = 0.0
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) \
            or not 0 <= seed < 2 ** 64:
        errors.add("seed")
        seed = 0
    hb = _number(doc, "heartbeat_interval_s", errors, "heartbeat_interval_s",
                 default=2.0, minimum=1e-9)
    partitions = doc.get("partitions", 64)
    if not isinstance(partitions, int) or partitions < 1 \
            or partitions & (partitions - 1):
        errors.add("partitions")
        partitions = 64
    rf = doc.get("replication_factor", 3)
    if not isinstance(rf, int) or rf < 1:
        errors.add("replication_factor")
        rf = 3
    queue_cap = doc.get("queue_cap", 10_000)
    if not isinstance(queue_cap, int) or queue_cap < 1:
        errors.add("queue_cap")
        queue_cap = 10_000
    level = doc.get("workload_level", STRESS)
    if level not in (STRESS, IDLE):
        errors.add("workload_level")
        level = STRESS

    t = _build_topology(doc, errors)
    bank, policy, priorities = _build_power(doc, errors)
    power = doc.get("power", {}) if isinstance(doc.get("power"), dict) else {}
    charge_w = _number(power, "charge_w", errors, "power.charge_w",
                       default=0.0, minimum=0.0)
    ambient_c = power.get("ambient_c", 20.0)
    if not isinstance(ambient_c, (int, float)) or isinstance(ambient_c, bool):
        errors.add("power.ambient_c")
        ambient_c = 20.0

    link_doc = doc.get("link", {}) or {}
    link = UpstreamLink()
    if not isinstance(link_doc, dict):
        errors.add("link")
    else:
        for name_, attr in (("latency_ms", "latency_ms"),
                            ("bandwidth_kbps", "bandwidth_kbps"),
                            ("probe_interval_s", "probe_interval_s")):
            if name_ in link_doc:
                v = _number(link_doc, name_, errors, f"link.{name_}",
                            minimum=1e-9)
                if v is not None:
                    setattr(link, attr, float(v))

    workload = _build_workload(doc, duration, errors)
    faults = _build_faults(doc, duration, t, errors)
    for prio_port in sorted(priorities):
        if prio_port not in t.component_ids():
            errors.add(f"power.port_priorities.{prio_port}",
                       f"no such port: {prio_port!r}")

    errors.raise_if_any()
    return Scenario(
        name=name, topology=t, duration_s=float(duration), seed=seed,
        bank=bank, policy=policy, heartbeat_interval_s=float(hb),
        partition_count=partitions, replication_factor=rf,
        queue_cap=queue_cap, workload_level=level,
        charge_w=float(charge_w), ambient_c=float(ambient_c),
        port_priorities=priorities, link=link,
        workload=workload, faults=faults)


def load_scenario(path) -> Scenario:
    """Read and validate a YAML or JSON scenario file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read scenario: {exc}") from exc
    return parse_scenario(text)


def parse_scenario(text: str) -> Scenario:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"scenario is not valid YAML: {exc}") from exc
    return build_scenario(doc)


def bundled_scenario_names() -> list[str]:
    root = importlib.resources.files("cloudlet").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir()
                  if p.name.endswith(".yaml"))


def load_bundled_scenario(name: str) -> Scenario:
    root = importlib.resources.files("cloudlet").joinpath("scenarios")
    res = root.joinpath(f"{name}.yaml")
    if not res.is_file():
        raise ParseError(f"no bundled scenario named {name!r}")
    return parse_scenario(res.read_text(encoding="utf-8"))


# ----------------------------------------------------------------------
# run
# ----------------------------------------------------------------------

@dataclass
class RunReport:
    scenario: str
    seed: int
    duration_s: float
    availability_pct: float
    ops_total: int
    ops_acked: int
    data_loss_count: int
    max_sync_lag: dict
    final_soc: float
    bank_empty: bool
    shed_events: int
    downtime_s: dict
    epoch: int
    rebalances: int
    upstream: dict
    trace_events: int

    def to_document(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "duration_s": self.duration_s,
            "availability_pct": self.availability_pct,
            "ops_total": self.ops_total,
            "ops_acked": self.ops_acked,
            "data_loss_count": self.data_loss_count,
            "max_sync_lag": self.max_sync_lag,
            "final_soc": self.final_soc,
            "bank_empty": self.bank_empty,
            "shed_events": self.shed_events,
            "downtime_s": self.downtime_s,
            "epoch": self.epoch,
            "rebalances": self.rebalances,
            "upstream": self.upstream,
            "trace_events": self.trace_events,
        }

    def human_table(self) -> str:
        rows = [
            ("scenario", f"{self.scenario} (seed {self.seed})"),
            ("duration", f"{self.duration_s:g} s"),
            ("availability", f"{self.availability_pct:.2f} % "
                             f"({self.ops_acked}/{self.ops_total} ops)"),
            ("data loss", str(self.data_loss_count)),
            ("max sync lag", f"{self.max_sync_lag['pending']} pending, "
                             f"{self.max_sync_lag['age_s']:.1f} s oldest"),
            ("final soc", f"{self.final_soc:.4f}"
                          + (" (bank empty)" if self.bank_empty else "")),
            ("shed events", str(self.shed_events)),
            ("epoch", f"{self.epoch} ({self.rebalances} rebalances)"),
            ("upstream", f"{self.upstream['applies']} applies, "
                         f"{self.upstream['duplicate_applies']} duplicate, "
                         f"{self.upstream['pending_at_end']} pending"),
        ]
        if self.downtime_s:
            downtime = ", ".join(f"{k}={v:g}s"
                                 for k, v in self.downtime_s.items())
            rows.append(("downtime", downtime))
        width = max(len(label) for label, _ in rows)
        return "\n".join(f"{label:<{width}}  {value}"
                         for label, value in rows)


@dataclass
class EventTrace:
    events: list[dict]
    report: RunReport

    def canonical_lines(self) -> Iterator[str]:
        for e in self.events:
            yield json.dumps(e, sort_keys=True, separators=(",", ":"))

    def canonical_bytes(self) -> bytes:
        return ("\n".join(self.canonical_lines()) + "\n").encode("utf-8")

    def write(self, fh: IO[str]):
        for line in self.canonical_lines():
            fh.write(line + "\n")


def substream(seed: int, name: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


class _Sim:
    HEARTBEAT = "heartbeat"
    PROBE = "probe"
    DRAIN = "drain"
    POWER = "power"
    FAULT = "fault"
    OP = "op"

    def __init__(self, scenario: Scenario, seed: int):
        self.sc = scenario
        self.seed = seed
        self.events: list[dict] = []
        self.heap: list[tuple[float, int, str, object]] = []
        self._seq = 0
        self.rt = ClusterRuntime(
            scenario.topology,
            bank=scenario.bank,
            policy=scenario.policy,
            heartbeat_interval_s=scenario.heartbeat_interval_s,
            partition_count=scenario.partition_count,
            replication_factor=scenario.replication_factor,
            queue_cap=scenario.queue_cap,
            link=UpstreamLink(latency_ms=scenario.link.latency_ms,
                              bandwidth_kbps=scenario.link.bandwidth_kbps,
                              probe_interval_s=scenario.link.probe_interval_s),
            port_priorities=scenario.port_priorities or None,
            charge_w=scenario.charge_w,
            ambient_c=scenario.ambient_c,
            workload_level=scenario.workload_level,
            tracer=self._emit)
        self._gen_rngs: dict[int, random.Random] = {}
        self._sched_power_rev = -1
        self._last_link_state = self.rt.relay.link.state
        self.max_pending = 0
        self.max_age_s = 0.0

    # --- trace ---

    def _emit(self, ts: float, kind: str, data: dict):
        self.events.append({"ts": ts, "kind": kind, "data": data})

    # --- scheduling ---

    def _push(self, ts: float, kind: str, payload: object = None):
        if ts > self.sc.duration_s:
            return
        heapq.heappush(self.heap, (ts, self._seq, kind, payload))
        self._seq += 1

    def _schedule_power_crossing(self, now: float):
        self.rt.advance_power(now)  # crossing math needs a settled bank
        self._sched_power_rev = self.rt.power_rev
        crossing = self.rt.next_power_crossing(now)
        if crossing is not None:
            ts, target = crossing
            self._push(ts, self.POWER, (self.rt.power_rev, target))

    def _gen_fire_time(self, gen: WorkloadGen, k: int) -> float:
        return gen.start + k / gen.rate_hz

    def _schedule_generator(self, gen_idx: int, k: int):
        gen = self.sc.workload[gen_idx]
        if gen.count is not None and k >= gen.count:
            return
        ts = self._gen_fire_time(gen, k)
        if gen.stop is not None and ts > gen.stop:
            return
        self._push(ts, self.OP, (gen_idx, k))

    # --- event handlers ---

    def _run_client_op(self, now: float, op: str, key: str, value: bytes):
        data: dict = {"op": op, "key": key}
        try:
            if op == "put":
                version = self.rt.client_put(key, value, now)
                data.update(status="ok", counter=version.counter,
                            origin=version.origin, bytes=len(value))
            elif op == "delete":
                version = self.rt.client_delete(key, now)
                data.update(status="ok", counter=version.counter,
                            origin=version.origin)
            else:
                rec = self.rt.client_get(key, now)
                data.update(status="ok", counter=rec.version.counter,
                            origin=rec.version.origin, bytes=len(rec.value))
        except NotFound:
            data["status"] = "not_found"  # served: the key truly is absent
        except (CloudletError, RuntimeError) as exc:
            code = getattr(exc, "code", None) or "RUNTIME"
            data.update(status="error", error=code)
        self._emit(now, self.OP, data)

    def _handle_op(self, now: float, payload):
        if isinstance(payload, WorkloadOp):
            self._run_client_op(now, payload.op, payload.key,
                                payload.value.encode("utf-8"))
            return
        gen_idx, k = payload
        gen = self.sc.workload[gen_idx]
        rng = self._gen_rngs.setdefault(
            gen_idx, substream(self.seed, f"workload:{gen.stream}"))
        op = gen.ops[rng.randrange(len(gen.ops))]
        key = f"{KEY_PREFIX}{rng.randrange(gen.keys)}"
        value = rng.randbytes(gen.value_bytes) if op == "put" else b""
        self._run_client_op(now, op, key, value)
        self._schedule_generator(gen_idx, k + 1)

    def _handle_fault(self, now: float, fault: FaultEvent):
        if fault.action == "set_environment":
            self.rt.set_environment(now, charge_w=fault.charge_w,
                                    ambient_c=fault.ambient_c)
        elif fault.action == "add_subcluster":
            self.rt.add_subcluster(fault.index, fault.attach_to, now)
        else:
            self.rt.apply_fault(fault.component, fault.action, now,
                                torn=fault.torn)

    def _handle_probe(self, now: float):
        state = self.rt.relay.probe(now)
        if state != self._last_link_state:
            self._emit(now, self.PROBE, {
                "state": state, "backoff_s": self.rt.relay.link.backoff_s})
            self._last_link_state = state
        if state == DOWN:
            delay = self.rt.relay.link.backoff_s  # exponential reconnect
        else:
            delay = self.sc.link.probe_interval_s
        self._push(now + delay, self.PROBE, None)

    def _handle_drain(self, now: float):
        budget = int(self.sc.link.bandwidth_kbps * 125 * DRAIN_INTERVAL_S)
        acked = self.rt.relay.drain(DRAIN_BATCH, budget)
        if acked:
            self._emit(now, self.DRAIN, {
                "acked": acked, "pending": self.rt.relay.unacked_count()})
        self._push(now + DRAIN_INTERVAL_S, self.DRAIN, None)

    def _handle_power(self, now: float, payload) -> bool:
        rev, target = payload
        if rev != self.rt.power_rev:
            return False  # drain changed since this crossing was computed
        self.rt.settle_crossing(now, target)
        self.rt.apply_shedding(now)
        return True

    def _handle_heartbeat(self, now: float):
        self.rt.heartbeat_round(now)
        self._push(now + self.sc.heartbeat_interval_s, self.HEARTBEAT, None)

    # --- main loop ---

    def run(self) -> EventTrace:
        sc = self.sc
        self.rt.apply_shedding(0.0)
        self._schedule_power_crossing(0.0)
        self._push(sc.heartbeat_interval_s, self.HEARTBEAT, None)
        self._push(0.0, self.PROBE, None)
        self._push(DRAIN_INTERVAL_S, self.DRAIN, None)
        for fault in sc.faults:
            self._push(fault.at, self.FAULT, fault)
        for i, w in enumerate(sc.workload):
            if isinstance(w, WorkloadOp):
                self._push(w.at, self.OP, w)
            else:
                self._schedule_generator(i, 0)

        while self.heap:
            ts, _seq, kind, payload = heapq.heappop(self.heap)
            if kind == self.HEARTBEAT:
                self._handle_heartbeat(ts)
            elif kind == self.PROBE:
                self._handle_probe(ts)
            elif kind == self.DRAIN:
                self._handle_drain(ts)
            elif kind == self.POWER:
                if self._handle_power(ts, payload):
                    self._schedule_power_crossing(ts)  # chase the next one
            elif kind == self.FAULT:
                self._handle_fault(ts, payload)
            elif kind == self.OP:
                self._handle_op(ts, payload)
            if self.rt.power_rev != self._sched_power_rev:
                self._schedule_power_crossing(ts)
            pending, age = self.rt.relay.sync_lag(ts)
            if pending > self.max_pending:
                self.max_pending = pending
            if age > self.max_age_s:
                self.max_age_s = age

        self.rt.advance_power(sc.duration_s)
        pending, age = self.rt.relay.sync_lag(sc.duration_s)
        self.max_pending = max(self.max_pending, pending)
        self.max_age_s = max(self.max_age_s, age)
        report = audit(self.events, self.rt, sc, self.seed,
                       {"pending": self.max_pending, "age_s": self.max_age_s})
        return EventTrace(self.events, report)


def audit(events: list[dict], rt: ClusterRuntime, scenario: Scenario,
          seed: int, max_sync_lag: dict) -> RunReport:
    """Replay the acked-write ledger against the surviving replicas and the
    upstream stub; every report field is computed, never sampled."""
    final = rt.final_version_map()
    latest_acked: dict[str, tuple[int, str, bool]] = {}
    for key, order, _ts in rt.acked_ledger:
        if key not in latest_acked or order > latest_acked[key]:
            latest_acked[key] = order
    data_loss = sum(1 for key, order in latest_acked.items()
                    if final.get(key) is None or final[key] < order)

    ops = [e for e in events if e["kind"] == "op"]
    acked = sum(1 for e in ops if e["data"]["status"] != "error")
    availability = 100.0 * acked / len(ops) if ops else 100.0

    shed_events = sum(1 for e in events if e["kind"] == "shed_port")

    # Exactly-once upstream check: within-version duplicates, plus applies
    # whose version never matched any client-acked write (a relay that
    # re-versioned a resend would show up here, applied "once" each time).
    ledger_versions = {(key, order[0], order[1])
                       for key, order, _ts in rt.acked_ledger}
    duplicate_applies = sum(n - 1 for n in rt.stub.applies.values() if n > 1)
    duplicate_applies += sum(
        1 for (key, counter, origin) in rt.stub.applies
        if (key.decode("utf-8", "replace"), counter, origin)
        not in ledger_versions)

    # Per-key order: what the stub applied must be a prefix of what clients
    # acked, key by key; a reordering relay fails this even with lag.
    client_seq: dict[str, list[tuple[int, str]]] = {}
    for key, order, _ts in rt.acked_ledger:
        client_seq.setdefault(key, []).append((order[0], order[1]))
    stub_seq: dict[str, list[tuple[int, str]]] = {}
    for key, version in rt.stub.apply_log:
        stub_seq.setdefault(key.decode("utf-8", "replace"), []).append(
            (version.counter, version.origin))
    order_violations = sum(
        1 for key, seq in stub_seq.items()
        if seq != client_seq.get(key, [])[:len(seq)])

    # Convergence: keys whose newest upstream version differs from the
    # newest version the live replicas hold.
    stub_latest = {key.decode("utf-8", "replace"): state[0]
                   for key, state in rt.stub.state.items()}
    stub_divergence = sum(
        1 for key in set(stub_latest) | set(final)
        if stub_latest.get(key) != final.get(key))

    rebalances = sum(1 for e in events if e["kind"] == "rebalance")

    return RunReport(
        scenario=scenario.name,
        seed=seed,
        duration_s=scenario.duration_s,
        availability_pct=availability,
        ops_total=len(ops),
        ops_acked=acked,
        data_loss_count=data_loss,
        max_sync_lag=max_sync_lag,
        final_soc=float(rt.bank.soc),
        bank_empty=rt.bank_empty,
        shed_events=shed_events,
        downtime_s=rt.downtime_report(scenario.duration_s),
        epoch=rt.epoch,
        rebalances=rebalances,
        upstream={
            "applies": len(rt.stub.applies),
            "duplicate_applies": duplicate_applies,
            "resend_attempts": sum(n - 1 for n in rt.stub.attempts.values()),
            "order_violations": order_violations,
            "divergent_keys": stub_divergence,
            "pending_at_end": rt.relay.unacked_count(),
        },
        trace_events=len(events),
    )


def run(scenario: Scenario, seed: int | None = None) -> EventTrace:
    """Execute a scenario in virtual time; identical (scenario, seed) pairs
    produce byte-identical canonical traces."""
    return _Sim(scenario, scenario.seed if seed is None else seed).run()
