"""Command-line entry point: ``gryphon <command> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 runtime error.
Streaming output is line-delimited JSON; ``--pretty`` switches to tables.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .errors import (
    EventError,
    GraphError,
    GryphonError,
    InterpError,
    ParseError,
    RewriteError,
    SchemaError,
    SimulationError,
    TypeCheckError,
)
from .graph import load_graph
from .wire import dumps

OK, INVALID, RUNTIME = 0, 1, 2

# input the user can fix, as opposed to a failure while running
_VALIDATION = (GraphError, SchemaError, EventError, ParseError, TypeCheckError, RewriteError, InterpError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(obj, pretty: bool = False) -> None:
    if pretty and isinstance(obj, dict):
        width = max((len(str(k)) for k in obj), default=0)
        for k, v in obj.items():
            print(f"{k!s:<{width}}  {v if not isinstance(v, (dict, list)) else json.dumps(v)}")
    else:
        print(dumps(obj))
    sys.stdout.flush()


def _read_json(path: str):
    if path == "-":
        return json.load(sys.stdin)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# --- graph ---------------------------------------------------------------------


def cmd_graph_check(args) -> int:
    g = load_graph(args.file)
    histories = sum(sp.is_history for sp in g.spaces.values())
    print(f"OK: {len(g.spaces)} spaces ({histories} histories), {len(g.arcs)} arcs, {len(g.brokers)} brokers")
    return OK


def cmd_graph_optimize(args) -> int:
    from .optimizer import measure, rewrite_fixpoint

    g = load_graph(args.file)
    out, rewrites = rewrite_fixpoint(g, protect=args.protect)
    text = out.to_json() + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.report:
        stream = sys.stderr if not args.output else sys.stdout
        for rw in rewrites:
            print(dumps({"rewrite": rw.to_doc()}), file=stream)
        before, after = measure(g), measure(out)
        print(dumps({"summary": {"rewrites": len(rewrites), "arcs_before": len(g.arcs), "arcs_after": len(out.arcs),
                                 "selects_before": before[2], "selects_after": after[2],
                                 "spaces_before": len(g.spaces), "spaces_after": len(out.spaces)}}), file=stream)
    return OK


# --- network clients -------------------------------------------------------------


def _connect(args):
    from .client import Client
    from .server import parse_address

    host, port = parse_address(args.connect)
    return Client(host, port, args.client, timeout=args.timeout)


def cmd_publish(args) -> int:
    rows: list[list] = []
    if args.values is not None:
        rows.append(json.loads(args.values))
    if args.csv:
        from .demo import read_trades

        rows.extend([list(r) for r in read_trades(args.csv)])
    if not rows:
        raise UsageError("publish needs --values or --csv")
    failed = 0
    with _connect(args) as c:
        for values in rows:
            reply = c.publish(args.space, values)
            failed += reply.get("type") == "ERROR"
            _emit(reply, args.pretty)
    return INVALID if failed else OK


def cmd_subscribe(args) -> int:
    spec = schema = None
    if args.mode != "ordered":
        if not args.graph:
            raise UsageError("--mode optimistic|snapshot needs --graph to know the interpretation")
        g = load_graph(args.graph)
        sp = g.spaces[args.space]
        spec = sp.interp or next(g.spaces[a.dst].interp for a in g.out_arcs[args.space] if a.type == "interpret")
        schema = g.spaces[g.source_history(args.space)].schema
    n = 0
    with _connect(args) as c:
        for frame in c.subscribe(args.space, args.mode, args.predicate, args.start, spec=spec, schema=schema,
                                 idle=args.idle):
            _emit({k: v for k, v in frame.items() if k not in ("type", "sub")} | {"kind": frame["type"]},
                  args.pretty)
            n += 1
            if args.count and n >= args.count:
                break
    return OK


def cmd_meta_submit(args) -> int:
    payload = _read_json(args.payload)
    with _connect(args) as c:
        reply = c.meta(args.kind, payload, args.request_id)
    _emit(reply, args.pretty)
    if reply.get("type") == "ERROR" or reply.get("status") != "confirmed":
        return INVALID
    return OK


def cmd_stats(args) -> int:
    with _connect(args) as c:
        _emit(c.stats(), args.pretty)
    return OK


# --- broker --------------------------------------------------------------------


def cmd_broker_serve(args) -> int:
    from .server import parse_address, serve

    broker_id = args.id or os.environ.get("GRYPHON_BROKER_ID")
    data_dir = args.data_dir or os.environ.get("GRYPHON_DATA_DIR")
    if not broker_id:
        raise UsageError("broker id needed: --id or GRYPHON_BROKER_ID")
    if not data_dir:
        raise UsageError("data directory needed: --data-dir or GRYPHON_DATA_DIR")
    g = load_graph(args.graph)
    if broker_id not in g.brokers:
        raise UsageError(f"broker {broker_id!r} is not in the graph")
    peers = {}
    for item in args.peer:
        pid, sep, addr = item.partition("=")
        if not sep:
            raise UsageError(f"--peer wants id=host:port, got {item!r}")
        peers[pid] = parse_address(addr)

    def ready(srv):
        print(dumps({"broker": broker_id, "epoch": srv.epoch, "port": srv.port}), flush=True)

    try:
        asyncio.run(serve(broker_id, g, parse_address(args.listen), peers, Path(data_dir), ready))
    except KeyboardInterrupt:
        pass
    return OK


# --- simulation and demo ----------------------------------------------------------


def cmd_sim_run(args) -> int:
    from .simnet import load_scenario, run_scenario

    script = load_scenario(args.scenario)
    graph = args.graph or script.get("graph")
    if graph is None:
        raise UsageError("the scenario names no graph; pass --graph")
    trace = run_scenario(graph, script, args.seed, args.tick_limit)
    path = Path(args.trace or f"{Path(args.scenario).stem}-seed{args.seed}.trace.jsonl")
    trace.write(path)
    print(f"trace: {path}")
    for name, res in trace.assertions.items():
        line = f"{name}: {'pass' if res['ok'] else 'FAIL'}"
        if not res["ok"]:
            line += f" ({res['violations']} violations) " + "; ".join(res["detail"][:3])
        print(line)
    print(f"quiescent: {trace.quiescent} at tick {trace.ticks}")
    return OK if trace.ok else INVALID


def cmd_demo_stocks(args) -> int:
    from .demo import run_stocks

    res = run_stocks(args.trades, seed=args.seed, optimize=args.optimize)
    if args.pretty:
        print(f"{'seq':>5}  {'symbol':<6}  capital")
        for d in res.delivered:
            print(f"{d['seq']:>5}  {d['symbol']:<6}  {d['capital']:.2f}")
        print(f"{len(res.delivered)} events, {res.link_transmissions} link transmissions")
    else:
        sys.stdout.write(res.jsonl())
    if args.stats:
        print(dumps({"delivered": len(res.delivered), "link_transmissions": res.link_transmissions,
                     "assertions": {k: v["ok"] for k, v in res.trace.assertions.items()}}), file=sys.stderr)
    return OK if res.trace.ok else RUNTIME


# --- parser --------------------------------------------------------------------------


def _client_flags(p) -> None:
    p.add_argument("--connect", default=os.environ.get("GRYPHON_CONNECT", "127.0.0.1:7400"),
                   help="broker address host:port (default $GRYPHON_CONNECT or 127.0.0.1:7400)")
    p.add_argument("--client", default=f"cli-{os.getpid()}", help="client id")
    p.add_argument("--timeout", type=float, default=10.0, help="seconds to wait for a reply")
    p.add_argument("--pretty", action="store_true", help="human-readable output")


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="gryphon", description="Information-flow message broker.")
    root.add_argument("--version", action="version", version=f"gryphon {__version__}")
    root.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    broker = sub.add_parser("broker", help="run a broker").add_subparsers(dest="action", required=True,
                                                                           parser_class=_Parser)
    p = broker.add_parser("serve", help="serve one broker over TCP")
    p.add_argument("--id", help="broker id (default $GRYPHON_BROKER_ID)")
    p.add_argument("--graph", required=True, help="graph document (JSON)")
    p.add_argument("--listen", default="127.0.0.1:7400", help="host:port to accept connections on")
    p.add_argument("--peer", action="append", default=[], metavar="ID=HOST:PORT",
                   help="address of a neighbouring broker (repeat per neighbour)")
    p.add_argument("--data-dir", help="directory for logs and the epoch file (default $GRYPHON_DATA_DIR)")
    p.set_defaults(fn=cmd_broker_serve)

    graph = sub.add_parser("graph", help="validate or optimize a graph").add_subparsers(
        dest="action", required=True, parser_class=_Parser)
    p = graph.add_parser("check", help="validate a graph document")
    p.add_argument("file")
    p.set_defaults(fn=cmd_graph_check)
    p = graph.add_parser("optimize", help="rewrite selects toward the sources")
    p.add_argument("file")
    p.add_argument("-o", "--output", help="write the optimized graph here (default stdout)")
    p.add_argument("--report", action="store_true", help="print the rewrite log and arc counts")
    p.add_argument("--protect", action="append", default=[], metavar="SPACE",
                   help="space a client subscribes to; never removed (repeatable)")
    p.set_defaults(fn=cmd_graph_optimize)

    p = sub.add_parser("publish", help="publish events to a broker")
    _client_flags(p)
    p.add_argument("--space", required=True)
    p.add_argument("--values", help="event values as a JSON array")
    p.add_argument("--csv", help="publish every row of a symbol,price,volume file")
    p.set_defaults(fn=cmd_publish)

    p = sub.add_parser("subscribe", help="stream a space as line-delimited JSON")
    _client_flags(p)
    p.add_argument("--space", required=True)
    p.add_argument("--predicate", help="content filter (ordered mode only)")
    p.add_argument("--mode", choices=("ordered", "optimistic", "snapshot"), default="ordered")
    p.add_argument("--from", dest="start", type=int, default=0, help="resume after this seq")
    p.add_argument("--graph", help="graph document; needed for optimistic and snapshot modes")
    p.add_argument("--count", type=int, help="stop after this many frames")
    p.add_argument("--idle", type=float, help="stop after this many quiet seconds")
    p.set_defaults(fn=cmd_subscribe)

    meta = sub.add_parser("meta", help="reconfigure a running graph").add_subparsers(
        dest="action", required=True, parser_class=_Parser)
    p = meta.add_parser("submit", help="submit a graph change")
    _client_flags(p)
    p.add_argument("--kind", required=True,
                   choices=("add_space", "add_arc", "remove_arc", "remove_space", "add_subscription_route"))
    p.add_argument("--payload", required=True, help="JSON file with the change ('-' for stdin)")
    p.add_argument("--request-id")
    p.set_defaults(fn=cmd_meta_submit)

    sim = sub.add_parser("sim", help="deterministic network simulator").add_subparsers(
        dest="action", required=True, parser_class=_Parser)
    p = sim.add_parser("run", help="run a scenario script")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--graph", help="graph document (overrides the scenario's)")
    p.add_argument("--trace", help="trace output path")
    p.add_argument("--tick-limit", type=int)
    p.set_defaults(fn=cmd_sim_run)

    demo = sub.add_parser("demo", help="bundled demos").add_subparsers(dest="action", required=True,
                                                                      parser_class=_Parser)
    p = demo.add_parser("stocks", help="run the stocks pipeline on a trade file")
    p.add_argument("--trades", help="symbol,price,volume CSV (default: bundled 1,000 trades)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimize", action="store_true", help="rewrite the graph first")
    p.add_argument("--stats", action="store_true", help="print counters to stderr")
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(fn=cmd_demo_stocks)

    p = sub.add_parser("stats", help="print a broker's counters")
    _client_flags(p)
    p.set_defaults(fn=cmd_stats)
    return root


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return INVALID
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"gryphon: {exc}", file=sys.stderr)
        return INVALID
    except GryphonError as exc:
        print(f"gryphon: {exc.code}: {exc}", file=sys.stderr)
        invalid = isinstance(exc, _VALIDATION) or (isinstance(exc, SimulationError) and exc.code == "bad-scenario")
        return INVALID if invalid else RUNTIME
    except (FileNotFoundError, IsADirectoryError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"gryphon: {exc}", file=sys.stderr)
        return INVALID
    except (OSError, ConnectionError) as exc:
        print(f"gryphon: {exc}", file=sys.stderr)
        return RUNTIME
    except KeyboardInterrupt:
        return RUNTIME


if __name__ == "__main__":
    sys.exit(main())
