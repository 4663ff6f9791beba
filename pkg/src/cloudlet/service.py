"""HTTP face of a live cluster.

`serve` hosts one ClusterRuntime on the wall clock (optionally scaled) and
exposes the same views and controls the simulator exercises in virtual
time. A background ticker drives heartbeats, relay drains, probes, and the
scenario's scripted workload and faults; request handlers share the
runtime under one lock, so handlers stay small and the runtime stays
single-threaded in spirit.

All bodies are JSON except object payloads, which are raw bytes with
version and checksum metadata in headers.
"""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlsplit

from .clock import WallClock
from .errors import (
    CloudletError,
    DuplicateId,
    NoLiveReplica,
    NotFound,
    ParseError,
    PortPolicyViolation,
    QueueFull,
    StaleGateway,
    UnknownComponent,
    UnknownNode,
    ValidationError,
)
from .relay import UpstreamLink
from .runtime import ClusterRuntime
from .sim import DRAIN_BATCH, DRAIN_INTERVAL_S, Scenario, WorkloadOp, substream
from .store import checksum_hex

DEFAULT_PORT = 7070

_STATUS_BY_ERROR = (
    (NotFound, 404),
    (UnknownComponent, 404),
    (UnknownNode, 404),
    (PortPolicyViolation, 409),
    (DuplicateId, 409),
    (StaleGateway, 409),
    (QueueFull, 429),
    (NoLiveReplica, 503),
    (ParseError, 400),
    (ValidationError, 400),
)


def _http_status(exc: CloudletError) -> int:
    for klass, status in _STATUS_BY_ERROR:
        if isinstance(exc, klass):
            return status
    return 400


def materialize_workload(scenario: Scenario) -> list[tuple[float, str, str, bytes]]:
    """Expand the scenario workload into concrete (ts, op, key, value)
    tuples using the same substreams the simulator draws from."""
    out = []
    for i, w in enumerate(scenario.workload):
        if isinstance(w, WorkloadOp):
            out.append((w.at, w.op, w.key, w.value.encode("utf-8")))
            continue
        rng = substream(scenario.seed, f"workload:{w.stream}")
        k = 0
        while w.count is None or k < w.count:
            ts = w.start + k / w.rate_hz
            if ts > scenario.duration_s or (w.stop is not None and ts > w.stop):
                break
            op = w.ops[rng.randrange(len(w.ops))]
            key = f"k{rng.randrange(w.keys)}"
            value = rng.randbytes(w.value_bytes) if op == "put" else b""
            out.append((ts, op, key, value))
            k += 1
    out.sort(key=lambda item: item[0])
    return out


class ClusterService:
    """One runtime, one lock, one ticker; handlers borrow all three."""

    def __init__(self, scenario: Scenario, time_scale: float = 1.0):
        self.scenario = scenario
        self.clock = WallClock(time_scale)
        self.time_scale = time_scale
        self.lock = threading.RLock()
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
            workload_level=scenario.workload_level)
        self._faults = sorted(scenario.faults, key=lambda f: f.at)
        self._ops = materialize_workload(scenario)
        self._next_fault = 0
        self._next_op = 0
        self._next_heartbeat = scenario.heartbeat_interval_s
        self._next_probe = 0.0
        self._next_drain = DRAIN_INTERVAL_S
        self._stop = threading.Event()
        self._ticker = threading.Thread(target=self._tick_loop, daemon=True)

    def now(self) -> float:
        return self.clock.now()

    # --- background progression ---

    def start(self):
        self._ticker.start()

    def stop(self):
        self._stop.set()

    def _tick_loop(self):
        period_sim = min(1.0, self.scenario.heartbeat_interval_s)
        while not self._stop.is_set():
            self.tick()
            self._stop.wait(period_sim / self.time_scale)

    def tick(self):
        """Run everything the virtual-time loop would have dispatched up to
        the current wall-clock instant."""
        now = self.now()
        with self.lock:
            while (self._next_fault < len(self._faults)
                    and self._faults[self._next_fault].at <= now):
                fault = self._faults[self._next_fault]
                self._next_fault += 1
                try:
                    self._run_fault(fault)
                except CloudletError:
                    pass  # a scripted fault on an already-gone component
            while (self._next_op < len(self._ops)
                    and self._ops[self._next_op][0] <= now):
                _ts, op, key, value = self._ops[self._next_op]
                self._next_op += 1
                try:
                    self._run_op(op, key, value, now)
                except (CloudletError, RuntimeError):
                    pass  # background load may fail during injected faults
            self.rt.advance_power(now)
            self.rt.apply_shedding(now)
            if now >= self._next_heartbeat:
                self.rt.heartbeat_round(now)
                hb = self.scenario.heartbeat_interval_s
                self._next_heartbeat += ((now - self._next_heartbeat)
                                         // hb + 1) * hb
            if now >= self._next_probe:
                self.rt.relay.probe(now)
                self._next_probe = now + self.scenario.link.probe_interval_s
            if now >= self._next_drain:
                budget = int(self.scenario.link.bandwidth_kbps * 125
                             * DRAIN_INTERVAL_S)
                self.rt.relay.drain(DRAIN_BATCH, budget)
                self._next_drain = now + DRAIN_INTERVAL_S

    def _run_fault(self, fault):
        now = self.now()
        if fault.action == "set_environment":
            self.rt.set_environment(now, charge_w=fault.charge_w,
                                    ambient_c=fault.ambient_c)
        elif fault.action == "add_subcluster":
            self.rt.add_subcluster(fault.index, fault.attach_to, now)
        else:
            self.rt.apply_fault(fault.component, fault.action, now,
                                torn=fault.torn)

    def _run_op(self, op, key, value, now):
        if op == "put":
            self.rt.client_put(key, value, now)
        elif op == "delete":
            self.rt.client_delete(key, now)
        else:
            self.rt.client_get(key, now)

    def snapshot(self) -> dict:
        now = self.now()
        return self.rt.snapshot(now)


class _Handler(BaseHTTPRequestHandler):
    # set by make_server
    service: ClusterService = None  # type: ignore[assignment]
    protocol_version = "HTTP/1.1"

    # --- plumbing ---

    def log_message(self, fmt, *args):
        pass  # quiet by default; operators watch the panel, not the log

    def _cors(self):
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods",
                         "GET, PUT, POST, DELETE, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Access-Control-Expose-Headers",
                         "X-Version-Counter, X-Version-Origin, X-Checksum")

    def _send_json(self, doc, status: int = 200, headers=()):
        body = json.dumps(doc, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self._cors()
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        for name, value in headers:
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(body)

    def _send_bytes(self, payload: bytes, headers=()):
        self.send_response(200)
        self._cors()
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(len(payload)))
        for name, value in headers:
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(payload)

    def _send_error_doc(self, exc: Exception):
        if isinstance(exc, CloudletError):
            status, code = _http_status(exc), exc.code
        elif isinstance(exc, (ValueError, KeyError, TypeError)):
            status, code = 400, "BAD_REQUEST"
        else:
            status, code = 503, "UNAVAILABLE"
        self._send_json({"error": code, "message": str(exc)}, status)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _read_json(self) -> dict:
        raw = self._read_body()
        if not raw:
            return {}
        doc = json.loads(raw.decode("utf-8"))
        if not isinstance(doc, dict):
            raise ValueError("request body must be a JSON object")
        return doc

    def _version_headers(self, version, checksum: str | None = None):
        headers = [("X-Version-Counter", str(version.counter)),
                   ("X-Version-Origin", version.origin)]
        if checksum is not None:
            headers.append(("X-Checksum", checksum))
        return headers

    # --- verbs ---

    def do_OPTIONS(self):
        self.send_response(204)
        self._cors()
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        svc = self.service
        url = urlsplit(self.path)
        parts = [unquote(p) for p in url.path.split("/") if p]
        try:
            if parts == ["health"]:
                self._send_json({"ok": True, "now": svc.now(),
                                 "scenario": svc.scenario.name})
            elif parts == ["topology"]:
                with svc.lock:
                    self._send_json(svc.rt.topology_view())
            elif parts == ["power"]:
                with svc.lock:
                    svc.rt.advance_power(svc.now())
                    self._send_json(svc.rt.power_view())
            elif parts == ["ring"]:
                with svc.lock:
                    self._send_json(svc.rt.ring_view())
            elif parts == ["sync"]:
                with svc.lock:
                    self._send_json(svc.rt.sync_view(svc.now()))
            elif parts == ["members"]:
                with svc.lock:
                    self._send_json(svc.rt.members_view())
            elif parts == ["snapshot"]:
                with svc.lock:
                    self._send_json(svc.snapshot())
            elif parts == ["snapshot", "stream"]:
                self._stream_snapshots()
            elif len(parts) == 2 and parts[0] == "metrics":
                query = parse_qs(url.query)
                lo = float(query.get("from", ["0"])[0])
                hi_raw = query.get("to", [None])[0]
                with svc.lock:
                    hi = svc.now() if hi_raw is None else float(hi_raw)
                    samples = svc.rt.telemetry.query(parts[1], lo, hi)
                    self._send_json({
                        "node_id": parts[1],
                        "samples": [s.to_document() for s in samples]})
            elif len(parts) == 2 and parts[0] == "objects":
                with svc.lock:
                    rec = svc.rt.client_get(parts[1], svc.now())
                self._send_bytes(rec.value, self._version_headers(
                    rec.version, checksum_hex(rec.value)))
            else:
                self._send_json({"error": "NOT_FOUND",
                                 "message": f"no route {url.path}"}, 404)
        except Exception as exc:  # every route shares one error shape
            self._send_error_doc(exc)

    def do_PUT(self):
        svc = self.service
        parts = [unquote(p) for p in urlsplit(self.path).path.split("/") if p]
        try:
            if len(parts) == 2 and parts[0] == "objects":
                payload = self._read_body()
                with svc.lock:
                    version = svc.rt.client_put(parts[1], payload, svc.now())
                self._send_json(
                    {"key": parts[1], "counter": version.counter,
                     "origin": version.origin},
                    headers=self._version_headers(version,
                                                  checksum_hex(payload)))
            else:
                self._send_json({"error": "NOT_FOUND",
                                 "message": f"no route {self.path}"}, 404)
        except Exception as exc:
            self._send_error_doc(exc)

    def do_DELETE(self):
        svc = self.service
        parts = [unquote(p) for p in urlsplit(self.path).path.split("/") if p]
        try:
            if len(parts) == 2 and parts[0] == "objects":
                with svc.lock:
                    version = svc.rt.client_delete(parts[1], svc.now())
                self._send_json(
                    {"key": parts[1], "counter": version.counter,
                     "origin": version.origin, "deleted": True},
                    headers=self._version_headers(version))
            else:
                self._send_json({"error": "NOT_FOUND",
                                 "message": f"no route {self.path}"}, 404)
        except Exception as exc:
            self._send_error_doc(exc)

    def do_POST(self):
        svc = self.service
        parts = [unquote(p) for p in urlsplit(self.path).path.split("/") if p]
        try:
            if parts == ["nodes"]:
                doc = self._read_json()
                node_id = doc.get("node_id")
                if not isinstance(node_id, str):
                    raise ValueError("node_id is required")
                with svc.lock:
                    svc.rt.node_join(node_id, svc.now())
                    member = svc.rt.table.get(node_id)
                    self._send_json({"node_id": node_id,
                                     "state": member.state,
                                     "incarnation": member.incarnation})
            elif len(parts) == 3 and parts[0] == "nodes" \
                    and parts[2] == "heartbeat":
                with svc.lock:
                    svc.rt.node_heartbeat(parts[1], svc.now())
                    member = svc.rt.table.get(parts[1])
                    self._send_json({"node_id": parts[1],
                                     "state": member.state})
            elif len(parts) == 3 and parts[0] == "ports" \
                    and parts[2] in ("enable", "disable"):
                with svc.lock:
                    view = svc.rt.set_port(parts[1], parts[2] == "enable",
                                           svc.now())
                    self._send_json(view)
            elif parts == ["faults"]:
                doc = self._read_json()
                component = doc.get("component")
                action = doc.get("action")
                if not isinstance(component, str) or not isinstance(action, str):
                    raise ValueError("component and action are required")
                with svc.lock:
                    svc.rt.apply_fault(component, action, svc.now(),
                                       torn=bool(doc.get("torn", False)))
                    self._send_json(svc.rt.topology_view())
            elif parts == ["rebalance"]:
                with svc.lock:
                    svc.rt.heartbeat_round(svc.now())
                    self._send_json(svc.rt.ring_view())
            else:
                self._send_json({"error": "NOT_FOUND",
                                 "message": f"no route {self.path}"}, 404)
        except Exception as exc:
            self._send_error_doc(exc)

    # --- streaming ---

    def _stream_snapshots(self):
        svc = self.service
        interval = svc.scenario.heartbeat_interval_s / svc.time_scale
        self.send_response(200)
        self._cors()
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Cache-Control", "no-store")
        self.end_headers()
        try:
            while not svc._stop.is_set():
                with svc.lock:
                    doc = svc.snapshot()
                line = json.dumps(doc, sort_keys=True) + "\n"
                self.wfile.write(line.encode("utf-8"))
                self.wfile.flush()
                time.sleep(interval)
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        self.close_connection = True


def make_server(scenario: Scenario, host: str = "127.0.0.1",
                port: int = DEFAULT_PORT, time_scale: float = 1.0
                ) -> tuple[ThreadingHTTPServer, ClusterService]:
    """Build the HTTP server and its service; caller starts/stops both."""
    service = ClusterService(scenario, time_scale)
    handler = type("BoundHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server, service


def serve_forever(scenario: Scenario, host: str = "127.0.0.1",
                  port: int = DEFAULT_PORT, time_scale: float = 1.0):
    server, service = make_server(scenario, host, port, time_scale)
    service.start()
    try:
        server.serve_forever(poll_interval=0.2)
    finally:
        service.stop()
        server.server_close()
