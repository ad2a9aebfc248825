"""Deterministic discrete-event simulation of a broker deployment.

Virtual time advances in integer ticks.  Every action sits in one heap
ordered by (tick, counter), so simultaneous actions run in the order they
were scheduled and a (seed, scenario) pair always replays the same way.
Brokers run the production code unchanged behind a simulated runtime.
Frames cross simulated links as encoded bytes, so anything that cannot
go on the wire fails here too.

A scenario is a JSON object::

    {"graph": <graph document or path>,          # optional if passed in
     "clients": [{"id": "c1", "broker": "b3",
                  "subscribe": [{"space": "BigCapitals", "mode": "ordered"}]}],
     "workload": [{"at": 10, "client": "p1", "space": "NYSE", "values": [...]},
                  {"generate": {"client": "p1", "space": "NYSE", "count": 100,
                                "start": 10, "every": 2}},
                  {"at": 300, "client": "c1", "action": "disconnect"},
                  {"at": 400, "client": "admin", "meta": {"kind": ..., "payload": {...}}}],
     "faults": [{"kind": "drop", "link": "b1-b3", "seqs": [3, 5]},
                {"kind": "crash", "broker": "b2", "tick": 50},
                {"kind": "restart", "broker": "b2", "tick": 80}],
     "assertions": ["ordered_consistency", "durability", "quiescence"],
     "tick_limit": 100000}
"""

from __future__ import annotations

import heapq
import json
import random
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .broker import Broker
from .errors import FrameError, SimulationError
from .graph import FlowGraph, load_graph
from .interp import interpret_history, states_equal
from .link import ACK_DELAY, GAP_TIMEOUT
from .model import Event
from .reference import reference_histories
from .reflection import META_SPACE
from .session import OptimisticSession, OrderedSession
from .storage import MemoryLogStore, replay_log
from .wire import decode_frame, dumps, encode_frame

PUB_RETRY = 60
FAULT_KINDS = ("drop", "duplicate", "reorder", "crash", "restart", "partition")
ASSERTIONS = ("ordered_consistency", "durability", "optimistic_convergence", "frugality",
              "quiescence", "derivation")
DEFAULT_TICK_LIMIT = 200_000
FIXTURES = Path(__file__).parent / "fixtures"


def link_name(a: str, b: str) -> str:
    return "-".join(sorted((a, b)))


def _norm_link(text: str) -> str:
    parts = text.split("-")
    if len(parts) != 2 or not all(parts):
        raise SimulationError(f"link must look like 'a-b', got {text!r}", "bad-scenario")
    return link_name(*parts)


@dataclass(frozen=True)
class FaultSpec:
    kind: str
    link: str | None = None
    broker: str | None = None
    seqs: tuple[int, int] | None = None
    ticks: tuple[int, int] | None = None
    tick: int | None = None
    window: int = 0
    p: float | None = None
    persistent: bool = False

    @classmethod
    def from_doc(cls, doc: dict) -> FaultSpec:
        kind = doc.get("kind")
        if kind not in FAULT_KINDS:
            raise SimulationError(f"unknown fault kind {kind!r}", "bad-scenario")

        def pair(name):
            v = doc.get(name)
            if v is None:
                return None
            if isinstance(v, int):
                v = [v, v]
            if len(v) != 2 or v[0] > v[1] or v[0] < 0:
                raise SimulationError(f"{kind}.{name} must be a non-negative range", "bad-scenario")
            return (int(v[0]), int(v[1]))

        spec = cls(
            kind,
            link=_norm_link(doc["link"]) if "link" in doc else None,
            broker=doc.get("broker"),
            seqs=pair("seqs") or pair("seq"),
            ticks=pair("ticks"),
            tick=doc.get("tick"),
            window=int(doc.get("window", 0)),
            p=doc.get("p"),
            persistent=bool(doc.get("persistent", False)),
        )
        if kind in ("crash", "restart"):
            if spec.broker is None or spec.tick is None or spec.tick < 0:
                raise SimulationError(f"{kind} needs a broker and a non-negative tick", "bad-scenario")
        elif spec.link is None:
            raise SimulationError(f"{kind} needs a link", "bad-scenario")
        if kind == "partition" and spec.ticks is None:
            raise SimulationError("partition needs a tick range", "bad-scenario")
        if kind == "reorder" and spec.window <= 0:
            raise SimulationError("reorder needs a positive window", "bad-scenario")
        return spec

    def active(self, now: int) -> bool:
        return self.ticks is None or self.ticks[0] <= now <= self.ticks[1]

    def covers(self, frame: dict) -> bool:
        if self.seqs is None:
            return True
        seq = frame.get("seq")
        return frame.get("type") == "EVENT" and seq is not None and self.seqs[0] <= seq <= self.seqs[1]


def validate_faults(faults: list[FaultSpec], graph: FlowGraph | None = None) -> None:
    crashes: dict[str, list[int]] = {}
    links = {link_name(a, b) for a, b in graph.links} if graph is not None else None
    for f in faults:
        if graph is not None:
            if f.broker is not None and f.broker not in graph.brokers:
                raise SimulationError(f"{f.kind} names unknown broker {f.broker!r}", "bad-scenario")
            if f.link is not None and f.link not in links:
                raise SimulationError(f"{f.kind} names unknown link {f.link!r}", "bad-scenario")
        if f.kind in ("crash", "restart"):
            crashes.setdefault(f.broker, []).append((f.tick, f.kind))
    for broker, points in crashes.items():
        down = False
        for tick, kind in sorted(points, key=lambda p: (p[0], p[1] == "crash")):
            if kind == "crash":
                if down:
                    raise SimulationError(f"{broker} crashes twice without restart", "bad-scenario")
                down = True
                last = tick
            else:
                if not down or tick <= last:
                    raise SimulationError(f"restart of {broker} must follow its crash", "bad-scenario")
                down = False


class _Entry:
    __slots__ = ("cancelled", "fn")

    def __init__(self, fn: Callable[[], None]):
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class _BrokerRuntime:
    def __init__(self, sim: SimNet, broker_id: str, incarnation: int):
        self.sim = sim
        self.id = broker_id
        self.incarnation = incarnation

    def _alive(self) -> bool:
        return self.sim.incarnation[self.id] == self.incarnation and self.sim.brokers.get(self.id) is not None

    def now(self) -> int:
        return self.sim.clock

    def send(self, dst: str, frame: dict) -> None:
        if self._alive():
            self.sim.transmit(self.id, dst, frame)

    def call_later(self, delay: int, fn: Callable[[], None]) -> _Entry:
        def guarded():
            if self._alive():
                fn()

        return self.sim.schedule(delay, guarded)

    def trace(self, kind: str, **fields) -> None:
        if kind == "tx":
            fields["inc"] = self.incarnation
        self.sim.record(kind, **fields)


class SimClient:
    """A scripted client: publishes with retry, keeps one session per subscription."""

    def __init__(self, sim: SimNet, cid: str, home: str):
        self.sim = sim
        self.id = cid
        self.home = home
        self.connected = True
        self.subs: dict[str, dict] = {}
        self.sessions: dict[str, OrderedSession | OptimisticSession] = {}
        self.deliveries: dict[str, list[dict]] = {}
        self.next_pub = 1
        self.pending: dict[int, dict] = {}
        self.acked: list[dict] = []
        self.rejected: list[dict] = []
        self.meta_results: list[dict] = []
        self.pending_meta: dict[str, dict] = {}
        self.next_meta = 0
        self.errors: list[dict] = []
        self._ack_due = False
        self._gap_timers: set[str] = set()

    # -- outgoing ------------------------------------------------------------

    def send(self, frame: dict) -> None:
        if self.connected:
            self.sim.transmit(self.id, self.home, frame)

    def add_subscription(self, doc: dict) -> None:
        sub = str(doc.get("sub", doc["space"]))
        mode = doc.get("mode", "ordered")
        self.subs[sub] = dict(doc, sub=sub, mode=mode)
        home = self.sim.brokers.get(self.home)
        g = home.graph if home is not None else self.sim.current_graph()
        space = doc["space"]
        if mode == "ordered":
            self.sessions[sub] = OrderedSession(space, sub)
        else:
            if space not in g.spaces:
                raise SimulationError(f"client {self.id} subscribes to unknown space {space!r}", "bad-scenario")
            sp = g.spaces[space]
            spec = sp.interp
            if spec is None:
                spec = next(g.spaces[a.dst].interp for a in g.out_arcs[space] if a.type == "interpret")
            schema = g.spaces[g.source_history(space)].schema
            self.sessions[sub] = OptimisticSession(space, spec, schema, sub)
        self.deliveries[sub] = []

    def subscribe(self, doc: dict) -> None:
        """Subscribe mid-run; the space must exist in the live graph by now."""
        self.add_subscription(doc)
        self.resubscribe(str(doc.get("sub", doc["space"])))

    def connect(self) -> None:
        self.send({"type": "CONNECT", "client": self.id})
        for sub, doc in self.subs.items():
            self.resubscribe(sub)
        for pub in sorted(self.pending):
            self.send(self.pending[pub])
        for rid in sorted(self.pending_meta):
            self.send(self.pending_meta[rid])

    def resubscribe(self, sub: str) -> None:
        doc, sess = self.subs[sub], self.sessions[sub]
        frame = {"type": "SUBSCRIBE", "space": doc["space"], "sub": sub, "mode": doc["mode"],
                 "from": sess.cursor}
        if doc.get("predicate"):
            frame["predicate"] = doc["predicate"]
        if isinstance(sess, OptimisticSession) and sess.retained:
            frame["dirty"] = True
        self.send(frame)

    def publish(self, space: str, values: list) -> None:
        pub = self.next_pub
        self.next_pub += 1
        frame = {"type": "PUBLISH", "space": space, "values": values, "origin": self.id, "pub": pub}
        self.pending[pub] = frame
        self.send(frame)
        self.sim.schedule(PUB_RETRY, lambda: self._retry(pub))

    def _retry(self, pub: int) -> None:
        if pub in self.pending:
            self.send(self.pending[pub])
            self.sim.schedule(PUB_RETRY, lambda: self._retry(pub))

    def meta(self, kind: str, payload: Any, request_id: str | None = None) -> None:
        if not request_id:
            self.next_meta += 1
            request_id = f"{self.id}-{self.next_meta}"
        frame = {"type": "META_REQUEST", "kind": kind, "payload": payload, "request_id": request_id}
        self.pending_meta[request_id] = frame
        self.send(frame)
        self.sim.schedule(PUB_RETRY, lambda: self._retry_meta(request_id))

    def _retry_meta(self, rid: str) -> None:
        if rid in self.pending_meta:
            self.send(self.pending_meta[rid])
            self.sim.schedule(PUB_RETRY, lambda: self._retry_meta(rid))

    # -- incoming ------------------------------------------------------------

    def on_frame(self, frame: dict) -> None:
        t = frame.get("type")
        now = self.sim.clock
        if t == "ACK" and "pub" in frame:
            sent = self.pending.pop(frame["pub"], None)
            if sent is not None:
                self.acked.append({"pub": frame["pub"], "space": frame["space"], "seq": frame["seq"],
                                   "values": sent["values"]})
                self.sim.record("pub-ack", client=self.id, pub=frame["pub"], space=frame["space"],
                                seq=frame["seq"])
        elif t == "ERROR":
            if frame.get("pub") is not None and self.pending.pop(frame["pub"], None) is not None:
                self.rejected.append(frame)
            else:
                self.errors.append(frame)
            self.sim.record("client-error", client=self.id, code=frame.get("code"))
        elif t == "META_CONFIRM":
            self.meta_results.append(frame)
            self.pending_meta.pop(frame.get("request_id"), None)
        elif t in ("EVENT", "SNAPSHOT"):
            sub = frame.get("sub")
            sess = self.sessions.get(sub)
            if sess is None:
                return
            if t == "SNAPSHOT":
                if isinstance(sess, OptimisticSession):
                    sess.on_snapshot(frame["state"], frame["through"], now)
                    self.sim.record("snapshot-in", client=self.id, sub=sub, through=frame["through"])
            else:
                for ev in sess.receive(frame, now):
                    rec = {"seq": ev["seq"], "values": ev["values"]}
                    if ev.get("compressed"):
                        rec["compressed"] = True
                    self.deliveries[sub].append(rec)
                    self.sim.record("deliver", client=self.id, sub=sub, **rec)
            self._schedule_ack()
            self._watch_gap(sub)

    def _schedule_ack(self) -> None:
        if not self._ack_due:
            self._ack_due = True
            self.sim.schedule(ACK_DELAY, self._send_acks)

    def _send_acks(self) -> None:
        self._ack_due = False
        for sub in sorted(self.sessions):
            self.send(self.sessions[sub].ack())

    def _watch_gap(self, sub: str) -> None:
        sess = self.sessions[sub]
        if sess.gap_since is None or sub in self._gap_timers:
            return
        self._gap_timers.add(sub)

        def check():
            self._gap_timers.discard(sub)
            s = self.sessions[sub]
            if s.gap_since is None:
                return
            if s.gap_due(self.sim.clock):
                self.send(s.nack(self.sim.clock))
            self._watch_gap(sub)

        self.sim.schedule(GAP_TIMEOUT, check)


class SimNet:
    def __init__(self, graph: FlowGraph, seed: int = 0, faults: list[FaultSpec] = ()):
        self.graph = graph
        self.seed = seed
        self.rng = random.Random(seed)
        self.clock = 0
        self.counter = 0
        self.heap: list[tuple[int, int, _Entry]] = []
        self.faults = list(faults)
        validate_faults(self.faults, graph)
        self.records: list[dict] = []
        self.stores = {b: MemoryLogStore() for b in graph.brokers}
        self.brokers: dict[str, Broker | None] = {b: None for b in graph.brokers}
        self.incarnation = {b: 0 for b in graph.brokers}
        self.clients: dict[str, SimClient] = {}
        self.delays: dict[str, int] = {}
        for a, b in sorted(graph.links):
            self.delays[link_name(a, b)] = self.rng.randint(1, 3)
        self._dropped: set[tuple] = set()
        self.frames_sent = 0

    # -- scheduling ----------------------------------------------------------

    def schedule(self, delay: int, fn: Callable[[], None]) -> _Entry:
        entry = _Entry(fn)
        self.counter += 1
        heapq.heappush(self.heap, (self.clock + max(0, int(delay)), self.counter, entry))
        return entry

    def at(self, tick: int, fn: Callable[[], None]) -> _Entry:
        return self.schedule(max(0, tick - self.clock), fn)

    def record(self, kind: str, **fields) -> None:
        self.records.append({"t": self.clock, "kind": kind, **fields})

    # -- topology ------------------------------------------------------------

    def start_broker(self, bid: str) -> Broker:
        self.incarnation[bid] += 1
        inc = self.incarnation[bid]
        b = Broker(bid, self.graph, _BrokerRuntime(self, bid, inc), self.stores[bid], epoch=inc)
        self.brokers[bid] = b
        b.start()
        return b

    def crash(self, bid: str) -> None:
        if self.brokers.get(bid) is None:
            return
        self.brokers[bid] = None
        self.incarnation[bid] += 1  # void timers and frames of the dead incarnation
        self.record("crash", broker=bid)

    def restart(self, bid: str) -> None:
        if self.brokers.get(bid) is not None:
            return
        self.record("restart", broker=bid)
        self.start_broker(bid)
        for cid in sorted(self.clients):
            c = self.clients[cid]
            if c.home == bid and c.connected:
                self.schedule(1, c.connect)

    def add_client(self, cid: str, home: str) -> SimClient:
        if cid in self.graph.brokers:
            raise SimulationError(f"client id {cid!r} clashes with a broker", "bad-scenario")
        if home not in self.graph.brokers:
            raise SimulationError(f"client {cid} names unknown broker {home!r}", "bad-scenario")
        c = self.clients[cid] = SimClient(self, cid, home)
        self.delays.setdefault(link_name(cid, home), 1)
        return c

    # -- the wire ------------------------------------------------------------

    def transmit(self, src: str, dst: str, frame: dict) -> None:
        try:
            data = encode_frame(frame)
        except FrameError as exc:
            self.record("wire-error", frm=src, to=dst, code=exc.code)
            return
        self.frames_sent += 1
        name = link_name(src, dst)
        delay = self.delays.get(name, 1)
        copies = 1
        now = self.clock
        for f in self.faults:
            if f.link != name:
                continue
            if f.kind == "partition" and f.active(now):
                self.record("fault", fault="partition", frm=src, to=dst)
                return
            if f.kind == "drop" and f.active(now) and f.covers(frame):
                if f.p is not None and self.rng.random() >= f.p:
                    continue
                mark = (src, dst, frame.get("space"), frame.get("seq"), frame.get("sub"), "key" in frame)
                if f.persistent or mark not in self._dropped:
                    self._dropped.add(mark)
                    self.record("fault", fault="drop", frm=src, to=dst, seq=frame.get("seq"))
                    return
            elif f.kind == "duplicate" and f.active(now) and f.covers(frame) and f.seqs is not None:
                copies = 2
            elif f.kind == "reorder" and f.active(now):
                delay += self.rng.randint(0, f.window)
        for i in range(copies):
            self.schedule(delay + i, lambda: self._deliver(src, dst, data))

    def _deliver(self, src: str, dst: str, data: bytes) -> None:
        frame = decode_frame(data)
        if dst in self.brokers:
            b = self.brokers[dst]
            if b is None:
                return
            if src in self.clients and not self.clients[src].connected:
                return
            b.on_frame(frame, src)
        else:
            c = self.clients.get(dst)
            if c is not None and c.connected:
                c.on_frame(frame)

    # -- running -------------------------------------------------------------

    def run(self, tick_limit: int = DEFAULT_TICK_LIMIT) -> bool:
        """Run until nothing is scheduled; False if the tick limit cut it short."""
        while self.heap:
            tick, _, entry = self.heap[0]
            if tick > tick_limit:
                return False
            heapq.heappop(self.heap)
            if entry.cancelled:
                continue
            self.clock = tick
            entry.fn()
        return True

    def backlog(self) -> int:
        return sum(1 for _, _, e in self.heap if not e.cancelled)

    # -- final views ---------------------------------------------------------

    def final_history(self, space: str) -> list[dict]:
        g = self.current_graph()
        owners = [g.owner(space)] if space in g.spaces else []
        # a removed space survives only as its owner's tombstoned log
        owners += [bid for bid in sorted(self.stores) if space in self.stores[bid].logs]
        owner = owners[0] if owners else None
        b = self.brokers.get(owner) if owner else None
        if b is not None and space in b.histories:
            return b.histories[space].events
        if owner is not None and space in self.stores[owner].logs:
            return replay_log(self.stores[owner].logs[space])
        return []

    def current_graph(self) -> FlowGraph:
        b = self.brokers.get(self.graph.coordinator)
        return b.graph if b is not None else self.graph


@dataclass
class Trace:
    seed: int
    records: list[dict]
    quiescent: bool
    ticks: int
    backlog: int
    assertions: dict[str, dict] = field(default_factory=dict)
    sim: SimNet | None = None

    @property
    def ok(self) -> bool:
        return all(r["ok"] for r in self.assertions.values())

    def to_jsonl(self) -> str:
        lines = [dumps(r) for r in self.records]
        lines.append(dumps({"kind": "summary", "seed": self.seed, "quiescent": self.quiescent,
                            "ticks": self.ticks, "backlog": self.backlog, "assertions": self.assertions}))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    def deliveries(self, client: str, sub: str | None = None) -> list[dict]:
        c = self.sim.clients[client]
        if sub is None:
            sub = next(iter(c.deliveries))
        return c.deliveries[sub]

    def client_records(self, client: str) -> list[dict]:
        return [r for r in self.records if r.get("client") == client and r["kind"] == "deliver"]


# --- scenario loading -------------------------------------------------------


def load_scenario(source: dict | str | Path) -> dict:
    if isinstance(source, dict):
        return source
    text = str(source)
    base = None
    if not text.lstrip().startswith("{"):
        base = Path(text).parent
        text = Path(text).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SimulationError(f"scenario is not valid JSON: {exc}", "bad-scenario") from None
    if not isinstance(doc, dict):
        raise SimulationError("scenario must be a JSON object", "bad-scenario")
    graph = doc.get("graph")
    if isinstance(graph, str) and not graph.lstrip().startswith("{"):
        # a graph path is relative to the scenario file, then to the bundled fixtures
        for root in (base, FIXTURES):
            if root is not None and (root / graph).exists():
                doc["graph"] = str(root / graph)
                break
    return doc


def expand_workload(workload: list[dict], seed: int = 0) -> list[dict]:
    """Flatten ``generate`` shorthands into timed publishes of trades."""
    out = []
    for item in workload:
        gen = item.get("generate")
        if gen is None:
            out.append(item)
            continue
        rng = random.Random(gen.get("seed", seed))
        symbols = gen.get("symbols", ["IBM", "HPQ", "DELL", "MSFT", "ORCL"])
        start, every = gen.get("start", 10), gen.get("every", 2)
        for i in range(gen["count"]):
            price = round(rng.uniform(*gen.get("price", (1.0, 500.0))), 2)
            volume = rng.randint(*gen.get("volume", (1, 20000)))
            out.append({"at": start + i * every, "client": gen["client"], "space": gen["space"],
                        "values": [rng.choice(symbols), price, volume]})
    return out


def run_scenario(graph: FlowGraph | dict | str | None, script: dict | str | Path, seed: int = 0,
                 tick_limit: int | None = None) -> Trace:
    script = load_scenario(script)
    if graph is None:
        if "graph" not in script:
            raise SimulationError("scenario names no graph", "bad-scenario")
        graph = script["graph"]
    if not isinstance(graph, FlowGraph):
        graph = load_graph(graph)
    faults = [FaultSpec.from_doc(f) for f in script.get("faults", [])]
    sim = SimNet(graph, seed, faults)
    for doc in script.get("clients", []):
        c = sim.add_client(doc["id"], doc["broker"])
        for sub in doc.get("subscribe", []):
            if sub.get("space") not in graph.spaces and sub.get("space") != META_SPACE:
                raise SimulationError(f"client {c.id} subscribes to unknown space {sub.get('space')!r}",
                                      "bad-scenario")
            c.add_subscription(sub)
    workload = expand_workload(script.get("workload", []), seed)
    for item in workload:
        cid = item.get("client")
        if cid is None:
            raise SimulationError("workload item names no client", "bad-scenario")
        if cid not in sim.clients:
            space = item.get("space")
            home = item.get("broker") or (graph.owner(space) if space in graph.spaces else graph.coordinator)
            sim.add_client(cid, home)
    for bid in graph.brokers:
        sim.start_broker(bid)
    for cid in sorted(sim.clients):
        sim.at(0, sim.clients[cid].connect)
    for item in workload:
        sim.at(int(item.get("at", 0)), _action(sim, item))
    for f in faults:
        if f.kind == "crash":
            sim.at(f.tick, lambda b=f.broker: sim.crash(b))
        elif f.kind == "restart":
            sim.at(f.tick, lambda b=f.broker: sim.restart(b))
    limit = tick_limit or script.get("tick_limit", DEFAULT_TICK_LIMIT)
    quiescent = sim.run(limit) and all(b is not None and b.idle for b in sim.brokers.values())
    trace = Trace(seed, sim.records, quiescent, sim.clock, sim.backlog(), sim=sim)
    sim.record("final", **final_state(sim))
    names = script.get("assertions", ["quiescence"])
    for name in names:
        trace.assertions[name] = check_assertion(name, sim, trace)
    return trace


def _action(sim: SimNet, item: dict) -> Callable[[], None]:
    c = sim.clients[item["client"]]
    action = item.get("action")
    if "meta" in item:
        m = item["meta"]
        return lambda: c.meta(m["kind"], m.get("payload"), m.get("request_id"))
    if action == "subscribe":
        return lambda: c.subscribe(item["subscribe"])
    if action == "disconnect":

        def disconnect():
            c.connected = False
            b = sim.brokers.get(c.home)
            if b is not None:
                b.client_gone(c.id)
            sim.record("disconnect", client=c.id)

        return disconnect
    if action == "reconnect":

        def reconnect():
            c.connected = True
            sim.record("reconnect", client=c.id)
            c.connect()

        return reconnect
    if "values" in item:
        return lambda: c.publish(item["space"], item["values"])
    raise SimulationError(f"cannot interpret workload item {item}", "bad-scenario")


def final_state(sim: SimNet) -> dict:
    g = sim.current_graph()
    hist = {}
    for name, sp in g.spaces.items():
        if sp.is_history and name != META_SPACE:
            hist[name] = [[e["seq"], e["values"]] for e in sim.final_history(name)]
    clients = {}
    for cid in sorted(sim.clients):
        c = sim.clients[cid]
        view = {"acked": len(c.acked), "pending": len(c.pending)}
        for sub in sorted(c.sessions):
            s = c.sessions[sub]
            if isinstance(s, OptimisticSession):
                view[sub] = {"state": s.state.to_doc(), "watermark": s.watermark}
            else:
                view[sub] = {"cursor": s.cursor, "delivered": len(c.deliveries[sub])}
        clients[cid] = view
    return {"histories": hist, "clients": clients}


# --- assertions -------------------------------------------------------------


def _result(problems: list[str]) -> dict:
    return {"ok": not problems, "violations": len(problems), "detail": problems[:10]}


def check_assertion(name: str, sim: SimNet, trace: Trace) -> dict:
    if name not in ASSERTIONS:
        raise SimulationError(f"unknown assertion {name!r}", "bad-scenario")
    return _result(globals()[f"_check_{name}"](sim, trace))


def _check_quiescence(sim: SimNet, trace: Trace) -> list[str]:
    problems = []
    if not trace.quiescent:
        problems.append(f"not quiescent at tick {trace.ticks} (backlog {trace.backlog})")
    for cid in sorted(sim.clients):
        if sim.clients[cid].pending:
            problems.append(f"{cid} has {len(sim.clients[cid].pending)} unacknowledged publishes")
    return problems


def _expected_view(sim: SimNet, doc: dict) -> list[dict]:
    g = sim.current_graph()
    source = g.source_history(doc["space"])
    events = sim.final_history(source)
    if doc.get("predicate"):
        from .expr import parse_predicate

        pred = parse_predicate(doc["predicate"], g.spaces[source].schema)
        events = [e for e in events if pred.evaluate(e["values"])]
    return events


def _check_ordered_consistency(sim: SimNet, trace: Trace) -> list[str]:
    problems = []
    for cid in sorted(sim.clients):
        c = sim.clients[cid]
        for sub in sorted(c.sessions):
            if not isinstance(c.sessions[sub], OrderedSession):
                continue
            got = c.deliveries[sub]
            want = _expected_view(sim, c.subs[sub])
            seqs = [d["seq"] for d in got]
            if seqs != sorted(set(seqs)):
                problems.append(f"{cid}/{sub}: delivered seqs not strictly increasing")
            by_seq = {e["seq"]: e["values"] for e in want}
            for d in got:
                if by_seq.get(d["seq"]) != d["values"]:
                    problems.append(f"{cid}/{sub}: seq {d['seq']} absent from or different in the log")
                    break
            expected = [e["seq"] for e in want]
            if seqs != expected[: len(seqs)]:
                problems.append(f"{cid}/{sub}: view is not a prefix of the space's order")
            elif len(seqs) != len(expected):
                problems.append(f"{cid}/{sub}: saw {len(seqs)} of {len(expected)} events at quiescence")
    return problems


def _check_durability(sim: SimNet, trace: Trace) -> list[str]:
    problems = []
    g = sim.current_graph()
    for cid in sorted(sim.clients):
        for ack in sim.clients[cid].acked:
            space = ack["space"]
            owner = g.owner(space)
            if g.spaces[space].durable:
                logged = {e["seq"]: e["values"] for e in replay_log(sim.stores[owner].open(space))}
            else:
                logged = {e["seq"]: e["values"] for e in sim.final_history(space)}
            if logged.get(ack["seq"]) != ack["values"]:
                problems.append(f"{cid} pub {ack['pub']} acked as {space}#{ack['seq']} but missing")
    return problems + _check_ordered_consistency(sim, trace)


def _check_optimistic_convergence(sim: SimNet, trace: Trace) -> list[str]:
    problems = []
    g = sim.current_graph()
    for cid in sorted(sim.clients):
        c = sim.clients[cid]
        for sub in sorted(c.sessions):
            s = c.sessions[sub]
            if not isinstance(s, OptimisticSession):
                continue
            source = g.source_history(s.space)
            oracle = interpret_history(
                s.spec, [Event(s.schema, tuple(e["values"]), e["seq"]) for e in sim.final_history(source)]
            )
            if not states_equal(s.state, oracle):
                problems.append(f"{cid}/{sub}: state differs from interpretation of the log")
    return problems


def _check_frugality(sim: SimNet, trace: Trace) -> list[str]:
    seen: set[tuple] = set()
    problems = []
    for r in trace.records:
        if r["kind"] != "tx":
            continue
        k = (r["frm"], r["inc"], r["to"], r["space"], r["seq"])
        if k in seen:
            problems.append(f"{r['space']}#{r['seq']} crossed {r['frm']}->{r['to']} twice")
        seen.add(k)
    return problems


def _check_derivation(sim: SimNet, trace: Trace) -> list[str]:
    """Derived histories hold exactly what the arcs produce from their inputs."""
    g = sim.current_graph()
    sources = {n: sim.final_history(n) for n, sp in g.spaces.items()
               if sp.is_history and not g.in_arcs[n] and n != META_SPACE}
    expected = reference_histories(g, sources)
    problems = []
    for name, want in expected.items():
        if name in sources or name == META_SPACE or not g.spaces[name].is_history:
            continue
        got = sorted(dumps(e["values"]) for e in sim.final_history(name))
        if got != sorted(dumps(v) for v in want):
            problems.append(f"{name}: derived contents differ from the arc semantics")
    return problems
