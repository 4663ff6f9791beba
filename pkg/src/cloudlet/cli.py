"""Operator and CI entry point.

One binary, subcommand style. `sim run` executes a scenario in virtual
time and exits 0 only when the audit is clean, so CI can gate on it;
`serve` hosts the HTTP API on the wall clock; the remaining subcommands
are thin clients for a running instance, resolving the endpoint from
`--endpoint` or the CLOUDLET_ENDPOINT environment variable (flags win).

Exit codes are a stable contract: 0 success, 1 input or API error,
2 scenario invariant failure, 3 connectivity.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import urllib.error
import urllib.request
from urllib.parse import quote

from . import service, sim
from .errors import CloudletError, ParseError, ValidationError

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INVARIANT = 2
EXIT_CONNECTION = 3

DEFAULT_ENDPOINT = "http://127.0.0.1:7070"
HUMAN = "human"
JSON_OUT = "json"


class _Parser(argparse.ArgumentParser):
    """Usage mistakes are input errors; exit 2 stays reserved for
    invariant failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _common_flags(parser: argparse.ArgumentParser, *, post: bool = False):
    # the post-subcommand copies must not write defaults into the
    # namespace, or they silently undo flags given before the subcommand
    parser.add_argument("--endpoint",
                        default=argparse.SUPPRESS if post else None,
                        help="service address (falls back to "
                             "CLOUDLET_ENDPOINT, then "
                             f"{DEFAULT_ENDPOINT})")
    parser.add_argument("--output", choices=(HUMAN, JSON_OUT),
                        default=argparse.SUPPRESS if post else HUMAN,
                        help="human-readable text or exactly one JSON "
                             "document on stdout")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="cloudlet",
        description="Run, inspect, and poke a cloudlet cluster.")
    _common_flags(parser)
    # also accepted after the subcommand
    common = _Parser(add_help=False)
    _common_flags(common, post=True)
    commands = parser.add_subparsers(dest="command", required=True)

    sim_cmd = commands.add_parser("sim", help="virtual-time scenario runs")
    sim_sub = sim_cmd.add_subparsers(dest="sim_command", required=True)
    run_cmd = sim_sub.add_parser(
        "run", parents=[common],
        help="run a scenario file (or bundled name) to completion")
    run_cmd.add_argument("scenario", help="scenario file path or the name "
                                          "of a bundled scenario")
    run_cmd.add_argument("--seed", type=int, default=None,
                         help="override the scenario seed")
    run_cmd.add_argument("--report", default=None, metavar="FILE",
                         help="also write the run report as JSON")
    run_cmd.add_argument("--trace", default=None, metavar="FILE",
                         help="also write the canonical event trace as "
                              "newline-delimited JSON")

    serve_cmd = commands.add_parser(
        "serve", parents=[common],
        help="host a live cluster over HTTP on the wall clock")
    serve_cmd.add_argument("scenario", help="scenario file path or bundled "
                                            "name; its faults and workload "
                                            "replay in real time")
    serve_cmd.add_argument("--host", default="127.0.0.1")
    serve_cmd.add_argument("--port", type=int, default=service.DEFAULT_PORT)
    serve_cmd.add_argument("--time-scale", type=float, default=1.0,
                           help="wall-clock speedup factor")

    commands.add_parser("status", parents=[common],
                        help="print the cluster snapshot")

    fault_cmd = commands.add_parser("fault", help="fault controls")
    fault_sub = fault_cmd.add_subparsers(dest="fault_command", required=True)
    inject = fault_sub.add_parser("inject", parents=[common],
                                  help="apply a fault action")
    inject.add_argument("component")
    inject.add_argument("action", choices=("fail", "restore", "disk_loss"))
    inject.add_argument("--torn", action="store_true",
                        help="with relay fail: tear the last log record")

    port_cmd = commands.add_parser("port", parents=[common],
                                   help="PoE port control")
    port_cmd.add_argument("port_id")
    port_cmd.add_argument("action", choices=("enable", "disable"))

    put_cmd = commands.add_parser("put", parents=[common],
                                  help="write an object")
    put_cmd.add_argument("key")
    put_cmd.add_argument("value")

    get_cmd = commands.add_parser("get", parents=[common],
                                  help="read an object")
    get_cmd.add_argument("key")

    return parser


def _load_scenario(ref: str) -> sim.Scenario:
    if os.path.exists(ref):
        return sim.load_scenario(ref)
    if ref in sim.bundled_scenario_names():
        return sim.load_bundled_scenario(ref)
    raise ParseError(f"no scenario file or bundled scenario named {ref!r}")


def _emit(args, doc: dict, human: str):
    if args.output == JSON_OUT:
        print(json.dumps(doc, sort_keys=True))
    else:
        print(human)


# ----------------------------------------------------------------------
# local commands
# ----------------------------------------------------------------------

def _cmd_sim_run(args) -> int:
    try:
        scenario = _load_scenario(args.scenario)
    except (ParseError, ValidationError) as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    trace = sim.run(scenario, args.seed)
    report = trace.report
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            trace.write(fh)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_document(), fh, sort_keys=True, indent=2)
            fh.write("\n")
    _emit(args, report.to_document(), report.human_table())
    clean = (report.data_loss_count == 0
             and report.upstream["duplicate_applies"] == 0
             and report.upstream["order_violations"] == 0)
    return EXIT_OK if clean else EXIT_INVARIANT


def _cmd_serve(args) -> int:
    try:
        scenario = _load_scenario(args.scenario)
    except (ParseError, ValidationError) as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"serving {scenario.name} on http://{args.host}:{args.port} "
          f"(time scale {args.time_scale:g}x)", file=sys.stderr)
    try:
        service.serve_forever(scenario, args.host, args.port,
                              args.time_scale)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


# ----------------------------------------------------------------------
# client commands
# ----------------------------------------------------------------------

def _endpoint(args) -> str:
    url = args.endpoint or os.environ.get("CLOUDLET_ENDPOINT") \
        or DEFAULT_ENDPOINT
    return url.rstrip("/")


def _request(args, method: str, path: str, body: bytes | None = None,
             content_type: str = "application/json"):
    """One API round trip: returns (status, headers, body bytes); raises
    SystemExit-worthy errors via its callers' mapping."""
    req = urllib.request.Request(
        _endpoint(args) + path, data=body, method=method)
    if body is not None:
        req.add_header("Content-Type", content_type)
    with urllib.request.urlopen(req, timeout=30) as resp:
        return resp.status, dict(resp.headers), resp.read()


def _api_call(args, method: str, path: str, body: bytes | None = None,
              content_type: str = "application/json"):
    """Round trip with the CLI's error contract: connection problems exit 3,
    API rejections exit 1 after printing the server's error code."""
    try:
        return _request(args, method, path, body, content_type)
    except urllib.error.HTTPError as exc:
        raw = exc.read()
        try:
            doc = json.loads(raw.decode("utf-8"))
            print(f"{doc.get('error', 'API_ERROR')}: "
                  f"{doc.get('message', '')}", file=sys.stderr)
        except (ValueError, UnicodeDecodeError):
            print(f"API_ERROR: HTTP {exc.code}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)
    except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
        reason = getattr(exc, "reason", exc)
        print(f"CONNECTION_FAILED: {reason}", file=sys.stderr)
        raise SystemExit(EXIT_CONNECTION)


def _cmd_status(args) -> int:
    _status, _headers, raw = _api_call(args, "GET", "/snapshot")
    doc = json.loads(raw.decode("utf-8"))
    if args.output == JSON_OUT:
        print(json.dumps(doc, sort_keys=True))
        return EXIT_OK
    power = doc.get("power", {})
    sync = doc.get("sync", {})
    nodes = doc.get("nodes", {})
    states: dict[str, int] = {}
    for info in nodes.values():
        state = info.get("state", "unknown")
        states[state] = states.get(state, 0) + 1
    lines = [
        f"time      {doc.get('ts', 0.0):.1f} s",
        f"epoch     {doc.get('epoch')}",
        "nodes     " + (", ".join(f"{n} {s}" for s, n in sorted(states.items()))
                        or "none"),
        f"power     soc {power.get('soc', 0.0):.3f}, "
        f"draw {power.get('draw_w', 0.0):.1f} W",
        f"sync      {sync.get('pending', 0)} pending, "
        f"link {sync.get('link_state', '?')}",
    ]
    print("\n".join(lines))
    return EXIT_OK


def _cmd_fault(args) -> int:
    body = json.dumps({"component": args.component, "action": args.action,
                       "torn": args.torn}).encode("utf-8")
    _status, _headers, raw = _api_call(args, "POST", "/faults", body)
    doc = json.loads(raw.decode("utf-8"))
    down = sorted(set(doc.get("failed", [])))
    _emit(args, doc,
          f"{args.action} {args.component}: "
          f"{len(doc.get('live_nodes', []))} nodes live"
          + (f", failed: {', '.join(down)}" if down else ""))
    return EXIT_OK


def _cmd_port(args) -> int:
    _status, _headers, raw = _api_call(
        args, "POST", f"/ports/{quote(args.port_id, safe='')}/{args.action}",
        b"")
    doc = json.loads(raw.decode("utf-8"))
    _emit(args, doc,
          f"{doc.get('port_id', args.port_id)} "
          f"{'enabled' if doc.get('enabled') else 'disabled'} "
          f"({doc.get('priority')}, {doc.get('draw_w', 0.0):g} W)")
    return EXIT_OK


def _cmd_put(args) -> int:
    _status, _headers, raw = _api_call(
        args, "PUT", f"/objects/{quote(args.key, safe='')}",
        args.value.encode("utf-8"), content_type="application/octet-stream")
    doc = json.loads(raw.decode("utf-8"))
    _emit(args, doc, f"{args.key} @ {doc.get('counter')} "
                     f"via {doc.get('origin')}")
    return EXIT_OK


def _cmd_get(args) -> int:
    _status, headers, raw = _api_call(
        args, "GET", f"/objects/{quote(args.key, safe='')}")
    text = raw.decode("utf-8", "replace")
    if args.output == JSON_OUT:
        print(json.dumps({
            "key": args.key, "value": text,
            "counter": int(headers.get("X-Version-Counter", 0)),
            "origin": headers.get("X-Version-Origin", ""),
            "checksum": headers.get("X-Checksum", "")}, sort_keys=True))
    else:
        print(text)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "sim":
            return _cmd_sim_run(args)
        if args.command == "serve":
            return _cmd_serve(args)
        if args.command == "status":
            return _cmd_status(args)
        if args.command == "fault":
            return _cmd_fault(args)
        if args.command == "port":
            return _cmd_port(args)
        if args.command == "put":
            return _cmd_put(args)
        if args.command == "get":
            return _cmd_get(args)
    except SystemExit as exc:  # raised by _api_call with the exit code set
        return int(exc.code)
    except CloudletError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"IO_ERROR: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
