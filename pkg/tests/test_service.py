"""HTTP service routes, error mapping, and scenario replay on the ticker."""

import json
import threading
import urllib.error
import urllib.request

import pytest

from cloudlet import service, sim
from cloudlet.clock import SimClock


@pytest.fixture()
def live():
    """Server on an ephemeral port with a manual clock: tests advance time
    and tick explicitly, so nothing here depends on wall-clock timing."""
    scenario = sim.build_scenario({
        "name": "svc", "duration_s": 86400, "seed": 3,
        "heartbeat_interval_s": 2,
        "faults": [{"at": 1000.0, "component": "switch_2", "action": "fail"},
                   {"at": 2000.0, "component": "switch_2",
                    "action": "restore"}]})
    server, svc = service.make_server(scenario, port=0)
    svc.clock = SimClock()
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"

    def advance(ts):
        svc.clock.advance_to(ts)
        svc.tick()

    advance(2.0)  # first heartbeat round
    try:
        yield base, svc, advance
    finally:
        svc.stop()
        server.shutdown()
        server.server_close()


def fetch(method, url, body=None, content_type="application/json"):
    req = urllib.request.Request(url, data=body, method=method)
    if body is not None:
        req.add_header("Content-Type", content_type)
    with urllib.request.urlopen(req, timeout=10) as resp:
        return resp.status, dict(resp.headers), resp.read()


def fetch_json(method, url, doc=None):
    body = None if doc is None else json.dumps(doc).encode()
    status, headers, raw = fetch(method, url, body)
    return status, headers, json.loads(raw.decode())


def error_of(call):
    with pytest.raises(urllib.error.HTTPError) as exc:
        call()
    doc = json.loads(exc.value.read().decode())
    return exc.value.code, doc["error"]


class TestReadRoutes:
    def test_health(self, live):
        base, _svc, _advance = live
        _status, _headers, doc = fetch_json("GET", base + "/health")
        assert doc["ok"] is True
        assert doc["scenario"] == "svc"

    def test_views_have_expected_shapes(self, live):
        base, _svc, _advance = live
        _s, _h, topology = fetch_json("GET", base + "/topology")
        assert len(topology["subclusters"]) == 2
        assert topology["live_nodes"]
        _s, _h, power = fetch_json("GET", base + "/power")
        assert power["draw_w"] == pytest.approx(96.0)
        assert 0 < power["soc"] <= 1
        _s, _h, ring = fetch_json("GET", base + "/ring")
        assert ring["epoch"] == 1
        assert len(ring["assignment"]) == 64
        _s, _h, sync = fetch_json("GET", base + "/sync")
        assert {"pending", "in_flight", "acked_total", "oldest_age_s",
                "link_state", "backoff_s"} <= set(sync)
        _s, _h, members = fetch_json("GET", base + "/members")
        assert members["epoch"] == 1
        assert len(members["members"]) == 14

    def test_snapshot_and_metrics(self, live):
        base, _svc, advance = live
        advance(4.0)
        _s, _h, snap = fetch_json("GET", base + "/snapshot")
        assert set(snap) == {"ts", "epoch", "nodes", "power", "sync"}
        assert len(snap["nodes"]) == 14
        _s, _h, metrics = fetch_json(
            "GET", base + "/metrics/sub_1_ctl_1?from=0&to=10")
        assert metrics["node_id"] == "sub_1_ctl_1"
        assert len(metrics["samples"]) == 2  # rounds at 2 s and 4 s
        assert metrics["samples"][0]["draw_w"] == pytest.approx(48 / 7)

    def test_metrics_unknown_node_404(self, live):
        base, _svc, _advance = live
        code, err = error_of(
            lambda: fetch("GET", base + "/metrics/sub_9_ctl_1"))
        assert (code, err) == (404, "UNKNOWN_NODE")

    def test_unknown_route_404(self, live):
        base, _svc, _advance = live
        code, err = error_of(lambda: fetch("GET", base + "/nope"))
        assert (code, err) == (404, "NOT_FOUND")

    def test_cors_headers_everywhere(self, live):
        base, _svc, _advance = live
        _status, headers, _doc = fetch_json("GET", base + "/health")
        assert headers["Access-Control-Allow-Origin"] == "*"
        status, headers, _raw = fetch("OPTIONS", base + "/objects/x")
        assert status == 204
        assert "POST" in headers["Access-Control-Allow-Methods"]


class TestObjects:
    def test_round_trip_with_metadata_headers(self, live):
        base, _svc, _advance = live
        status, headers, doc = fetch_json(
            "PUT", base + "/objects/greeting",)
        # empty body put is legal: zero-length object
        assert status == 200 and doc["counter"] == 1
        status, headers, raw = fetch(
            "PUT", base + "/objects/greeting", b"hello",
            content_type="application/octet-stream")
        doc = json.loads(raw.decode())
        assert doc["counter"] == 2
        status, headers, raw = fetch("GET", base + "/objects/greeting")
        assert raw == b"hello"
        assert headers["X-Version-Counter"] == "2"
        assert headers["X-Version-Origin"].startswith("sub_")
        assert len(headers["X-Checksum"]) == 16
        assert headers["X-Checksum"] == headers["X-Checksum"].lower()

    def test_delete_then_404(self, live):
        base, _svc, _advance = live
        fetch("PUT", base + "/objects/gone", b"x",
              content_type="application/octet-stream")
        _s, headers, doc = fetch_json("DELETE", base + "/objects/gone")
        assert doc["deleted"] is True
        code, err = error_of(lambda: fetch("GET", base + "/objects/gone"))
        assert (code, err) == (404, "NOT_FOUND")

    def test_url_encoded_keys(self, live):
        base, _svc, _advance = live
        fetch("PUT", base + "/objects/a%2Fb%20c", b"slashed",
              content_type="application/octet-stream")
        _s, _h, raw = fetch("GET", base + "/objects/a%2Fb%20c")
        assert raw == b"slashed"


class TestControls:
    def test_port_disable_reduces_draw(self, live):
        base, _svc, _advance = live
        _s, _h, view = fetch_json(
            "POST", base + "/ports/switch_1_p3/disable", {})
        assert view["enabled"] is False
        _s, _h, power = fetch_json("GET", base + "/power")
        assert power["draw_w"] == pytest.approx(96.0 - 48 / 7)
        _s, _h, view = fetch_json(
            "POST", base + "/ports/switch_1_p3/enable", {})
        assert view["enabled"] is True

    def test_critical_port_disable_rejected(self, live):
        base, _svc, _advance = live
        code, err = error_of(lambda: fetch(
            "POST", base + "/ports/switch_1_p1/disable", b"{}"))
        assert (code, err) == (409, "PORT_POLICY")

    def test_fault_inject_and_restore(self, live):
        base, _svc, _advance = live
        _s, _h, doc = fetch_json("POST", base + "/faults",
                                 {"component": "switch_1", "action": "fail"})
        assert doc["failed"] == ["switch_1"]
        assert len(doc["live_nodes"]) == 7
        _s, _h, doc = fetch_json(
            "POST", base + "/faults",
            {"component": "switch_1", "action": "restore"})
        assert doc["failed"] == []
        assert len(doc["live_nodes"]) == 14

    def test_fault_unknown_component(self, live):
        base, _svc, _advance = live
        code, err = error_of(lambda: fetch(
            "POST", base + "/faults",
            json.dumps({"component": "switch_9", "action": "fail"}).encode()))
        assert (code, err) == (404, "UNKNOWN_COMPONENT")

    def test_join_duplicate_conflicts(self, live):
        base, _svc, _advance = live
        code, err = error_of(lambda: fetch(
            "POST", base + "/nodes",
            json.dumps({"node_id": "sub_1_sto_1"}).encode()))
        assert (code, err) == (409, "DUPLICATE_ID")

    def test_heartbeat_route(self, live):
        base, _svc, _advance = live
        _s, _h, doc = fetch_json(
            "POST", base + "/nodes/sub_1_sto_1/heartbeat", {})
        assert doc["state"] == "active"
        code, err = error_of(lambda: fetch(
            "POST", base + "/nodes/sub_9_sto_1/heartbeat", b"{}"))
        assert (code, err) == (404, "UNKNOWN_COMPONENT")

    def test_rebalance_returns_ring(self, live):
        base, _svc, _advance = live
        _s, _h, ring = fetch_json("POST", base + "/rebalance", {})
        assert ring["epoch"] >= 1
        assert len(ring["assignment"]) == 64


class TestScenarioReplay:
    def test_scripted_fault_fires_and_membership_follows(self, live):
        base, svc, advance = live
        advance(1000.5)  # scripted switch_2 failure at t=1000
        _s, _h, topology = fetch_json("GET", base + "/topology")
        assert topology["failed"] == ["switch_2"]
        advance(1008.0)  # three missed 2 s heartbeats mark them down
        _s, _h, members = fetch_json("GET", base + "/members")
        down = [n for n, m in members["members"].items()
                if m["state"] == "down"]
        assert len(down) == 7
        advance(2000.5)  # scripted restore
        _s, _h, topology = fetch_json("GET", base + "/topology")
        assert topology["failed"] == []
        advance(2002.5)
        _s, _h, members = fetch_json("GET", base + "/members")
        states = {m["state"] for m in members["members"].values()}
        assert "down" not in states

    def test_workload_replays_from_the_same_substreams(self):
        scenario = sim.build_scenario({
            "name": "w", "duration_s": 30, "seed": 9,
            "workload": [
                {"kind": "put", "at": 1, "key": "pinned", "value": "v"},
                {"kind": "generator", "start": 2, "rate_hz": 1, "count": 5,
                 "keys": 8, "value_bytes": 4, "ops": ["put"],
                 "stream": "w"}]})
        ops = service.materialize_workload(scenario)
        assert len(ops) == 6
        assert ops[0] == (1.0, "put", "pinned", b"v")
        sim_keys = [e["data"]["key"]
                    for e in sim.run(scenario).events if e["kind"] == "op"]
        assert [key for _ts, _op, key, _v in ops] == sim_keys


class TestStream:
    def test_snapshot_stream_emits_ndjson(self):
        scenario = sim.build_scenario({
            "name": "stream", "duration_s": 600, "seed": 3,
            "heartbeat_interval_s": 2})
        server, svc = service.make_server(scenario, port=0, time_scale=50.0)
        svc.clock = SimClock()
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        svc.clock.advance_to(2.0)
        svc.tick()
        base = f"http://127.0.0.1:{server.server_address[1]}"
        try:
            with urllib.request.urlopen(base + "/snapshot/stream",
                                        timeout=10) as resp:
                assert resp.headers["Content-Type"] == "application/x-ndjson"
                first = json.loads(resp.readline().decode())
                second = json.loads(resp.readline().decode())
            assert set(first) == {"ts", "epoch", "nodes", "power", "sync"}
            assert second["ts"] >= first["ts"]
        finally:
            svc.stop()
            server.shutdown()
            server.server_close()
