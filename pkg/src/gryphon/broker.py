"""The broker runtime.

A broker hosts the spaces the graph assigns to it.  It sequences every
hosted history, logs durable ones before anything downstream sees an
event, executes the arcs whose destination it hosts and serves client
sessions.

Everything that reads a history is a *consumer* with a key and a cursor:
arc executors, client sessions and the meta-space follower.  A consumer
SUBSCRIBEs toward the owner of the history it reads.  Each broker on the
way records the key's predicate against the link it came from.  The
owner replays events past the cursor back along that path, then sends an
ACK with ``through``, and from then on live events flow.  A live event
crosses a link at most once, and only if some predicate registered on
that link matches, so events carry no destination lists.

The broker never touches sockets or clocks directly; it talks to a
:class:`~gryphon.link.Runtime`, which is either the simulator or the
asyncio server.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass, field

from .errors import BrokerError, EvaluationError, EventError, GraphError, GryphonError
from .expr import Predicate, parse_predicate
from .graph import FlowGraph
from .interp import InterpSpec, InterpState, compress_history
from .link import LinkChannel, Runtime, Timer
from .matching import MatchTree, subscriptions_for
from .model import Event, Schema, validate_event
from .reflection import META_SPACE, MetaEvent, apply_change, with_meta_space
from .storage import MemoryLogStore, replay_log
from .wire import encode_frame, error_frame

log = logging.getLogger(__name__)

LOCAL = ""
SESSION_RTO = 40
RESEND_LIMIT = 256
MODES = ("ordered", "optimistic", "snapshot")


def _finite(values) -> bool:
    return all(not isinstance(v, float) or math.isfinite(v) for v in values)


class Interest:
    """Keys interested in one space behind one link (or locally).

    Keys with a predicate live in a matching tree; keys without one (or
    whose predicate this broker cannot parse) always match.
    """

    def __init__(self, schema: Schema | None):
        self.tree = MatchTree(schema) if schema is not None else None
        self.preds: dict[str, Predicate | None] = {}
        self.always: dict[str, None] = {}

    def __len__(self) -> int:
        return len(self.preds)

    def put(self, key: str, pred: Predicate | None) -> None:
        self.drop(key)
        self.preds[key] = pred
        if pred is None or pred.is_true or self.tree is None:
            self.always[key] = None
        else:
            for sub in subscriptions_for(pred, key):
                self.tree.add(sub)

    def drop(self, key: str) -> None:
        if key not in self.preds:
            return
        pred = self.preds.pop(key)
        if key in self.always:
            del self.always[key]
        else:
            for sub in subscriptions_for(pred, key):
                self.tree.remove(sub.sub_id)

    def _tree_hits(self, values) -> set[str]:
        if self.tree is None or not len(self.tree):
            return set()
        try:
            return {sid.split("#", 1)[0] for sid in self.tree.match_values(values)}
        except (EvaluationError, TypeError):
            # cannot decide here; let the consumer's own check settle it
            return set(self.preds)

    def matching(self, values) -> list[str]:
        hits = self._tree_hits(values)
        return [k for k in self.preds if k in self.always or k in hits]

    def any(self, values) -> bool:
        return bool(self.always) or bool(self._tree_hits(values))


@dataclass
class Consumer:
    key: str
    space: str
    owner: str
    predicate: str | None
    handler: Callable[[dict], None]
    cursor: int = 0
    on_ready: Callable[[int], None] | None = None
    rid: int = 0
    state: str = "idle"  # resuming | live | paused
    until: int | None = None


@dataclass
class History:
    name: str
    schema: Schema
    durable: bool
    log: object = None
    events: list[dict] = field(default_factory=list)
    pubs: dict[tuple, int] = field(default_factory=dict)
    # per event, the durable (space, seq) it descends from, if known
    roots: list[tuple | None] = field(default_factory=list)

    @property
    def next_seq(self) -> int:
        return len(self.events) + 1


@dataclass
class Session:
    client: str
    sub: str
    space: str
    source: str
    mode: str
    start: int
    key: str
    schema: Schema
    spec: InterpSpec | None = None
    mirror: InterpState | None = None
    mirror_seq: int = 0
    sent: list[dict] = field(default_factory=list)
    chain: int = 0
    acked: int = 0
    collecting: bool = False
    dirty: bool = False
    suffix: list[dict] = field(default_factory=list)
    rto: Timer | None = None


class Broker:
    def __init__(self, broker_id: str, graph: FlowGraph, runtime: Runtime, store=None, epoch: int = 0):
        if broker_id not in graph.brokers:
            raise BrokerError(f"broker {broker_id!r} is not in the graph", "unknown-broker")
        self.id = broker_id
        self.rt = runtime
        self.store = store if store is not None else MemoryLogStore()
        self.epoch = epoch
        self.base = with_meta_space(graph)
        self.graph = self.base
        self.brokers = frozenset(self.base.brokers)
        self.coordinator = self.base.coordinator
        self.ready = False
        self.pending: list[tuple[dict, str]] = []
        self.channels = {
            p: LinkChannel(broker_id, epoch, p, runtime, self._on_link_frame, self._on_peer_reset)
            for p in self.base.neighbors[broker_id]
        }
        self.histories: dict[str, History] = {}
        self.interps: dict[str, InterpState] = {}
        self.consumers: dict[str, Consumer] = {}
        self.sessions: dict[str, Session] = {}
        self.interest: dict[str, dict[str, Interest]] = {}
        self.key_route: dict[str, str] = {}
        self.arc_start: dict[str, int] = {}
        self.arc_skip: dict[str, Counter] = {}
        self.notices: set[tuple[str, int]] = set()
        self.counters = {"published": 0, "sequenced": 0, "dead_letters": 0, "forwarded": 0}
        self.link_tx: dict[str, int] = {p: 0 for p in self.channels}
        self.client_tx = 0
        self.meta_queue: list[dict] = []
        self.meta_cur: dict | None = None
        self.meta_count = 0

    # -- startup -------------------------------------------------------------

    def start(self) -> None:
        for ch in self.channels.values():
            ch.connect()
        if self.id == self.coordinator:
            h = self._open_history(META_SPACE)
            for frame in h.events:
                mev = MetaEvent.from_values(frame["values"])
                if mev.confirmed:
                    self._fold(mev)
            self._build()
        else:
            c = Consumer(f"meta:{self.id}", META_SPACE, self.coordinator, None,
                         self._on_meta_event, on_ready=self._meta_caught_up)
            self.consumers[c.key] = c
            self._subscribe(c)

    def _meta_caught_up(self, through: int) -> None:
        if not self.ready:
            self._build()

    def _open_history(self, name: str) -> History:
        sp = self.graph.spaces[name]
        h = History(name, sp.schema, sp.durable)
        if sp.durable:
            h.log = self.store.open(name)
            for rec in replay_log(h.log):
                ev = {k: rec[k] for k in ("type", "space", "seq", "values", "origin")}
                if ev["seq"] != h.next_seq:
                    raise BrokerError(f"log of {name} is out of sequence at {ev['seq']}", "corrupt-log")
                h.events.append(ev)
                h.roots.append((name, ev["seq"]))
                if rec.get("pub") is not None:
                    h.pubs[(rec["origin"], rec["pub"])] = ev["seq"]
        self.histories[name] = h
        return h

    def _build(self) -> None:
        """Materialize hosted spaces and arc executors for the current graph."""
        g = self.graph
        for name, sp in g.spaces.items():
            if sp.broker != self.id:
                continue
            if sp.is_history and name not in self.histories:
                self._open_history(name)
            elif not sp.is_history and name not in self.interps:
                self.interps[name] = InterpState(sp.interp)
        cursors = self._prov_cursors()
        for arc in g.arcs.values():
            if g.owner(arc.dst) != self.id:
                continue
            cursor = cursors.get(arc.id, self.arc_start.get(arc.id, 0))
            skip = self._rebuilt_feed_skips(arc)
            if skip is not None:
                cursor, self.arc_skip[arc.id] = 0, skip
            self._start_arc(arc, cursor)
        self.ready = True
        self.rt.trace("ready", broker=self.id, epoch=self.epoch, version=g.version)
        queued, self.pending = self.pending, []
        for frame, src in queued:
            if src == "@subscribe":
                self._serve_subscribe(frame)
            elif src == "@publish":
                self._owner_publish(frame)
            elif src == "@meta":
                self._coord_request(frame)
            elif src == "@pause":
                self._on_meta_confirm(frame)
            else:
                self.on_frame(frame, src)

    def _prov_cursors(self) -> dict[str, int]:
        cursors: dict[str, int] = {}
        for h in self.histories.values():
            if not h.durable:
                continue
            for rec in replay_log(h.log):
                prov = rec.get("prov")
                if prov:
                    cursors[prov[0]] = max(cursors.get(prov[0], 0), prov[1])
        return cursors

    def _rebuilt_feed_skips(self, arc) -> Counter | None:
        """Roots an arc already delivered, when its feed was rebuilt here.

        A non-durable history hosted here starts empty after a restart and
        is refilled from its inputs, possibly in a different order, so seqs
        logged as provenance no longer name the same events.  The arc then
        reads the rebuilt feed from the start and skips what its durable
        destination already holds, matched by root.
        """
        feed = self.histories.get(self.feed_space(arc))
        dst = self.histories.get(arc.dst) if arc.type != "interpret" else None
        if feed is None or feed.durable or dst is None or not dst.durable:
            return None
        roots = Counter()
        for rec in replay_log(dst.log):
            prov = rec.get("prov")
            if not prov or prov[0] != arc.id:
                continue
            if rec.get("root") is None:
                return None  # logged before roots were known: keep the seq cursor
            roots[tuple(rec["root"])] += 1
        return roots

    def _root_of(self, frame: dict) -> tuple | None:
        space, seq = frame["space"], frame["seq"]
        h = self.histories.get(space)
        if h is not None:
            return h.roots[seq - 1] if seq <= len(h.roots) else None
        sp = self.graph.spaces.get(space)
        return (space, seq) if sp is not None and sp.durable else None

    def feed_space(self, arc) -> str:
        """The history an arc's executor reads."""
        return self.graph.source_history(arc.src)

    # -- arc executors -------------------------------------------------------

    def _start_arc(self, arc, cursor: int) -> None:
        handler = self._arc_handler(arc)
        pred = arc.predicate.render() if arc.type == "select" and arc.predicate is not None else None
        space = self.feed_space(arc)
        c = Consumer(f"arc:{arc.id}", space, self.graph.owner(space), pred, handler, cursor)
        self.consumers[c.key] = c
        self._subscribe(c)

    def _arc_handler(self, arc) -> Callable[[dict], None]:
        g = self.graph
        if arc.type == "interpret":
            state = self.interps[arc.dst]
            schema = g.spaces[arc.src].schema

            def interpret(frame: dict) -> None:
                state.apply(Event(schema, tuple(frame["values"]), frame["seq"]))
                state.compact(frame["seq"])

            return interpret

        dst = self.histories[arc.dst]
        if arc.type == "expand":
            spec = g.spaces[arc.src].interp
            src_schema = g.spaces[g.source_history(arc.src)].schema
            idx = [src_schema.index(k) for k in spec.key_attrs] + [src_schema.index(spec.value_attr)]

            def op(values):
                return [values[i] for i in idx]
        elif arc.type == "select":
            pred = arc.predicate

            def op(values):
                return values if pred is None or pred.evaluate(values) else None
        elif arc.type == "transform":
            transform = arc.transform

            def op(values):
                return list(transform.apply_values(tuple(values)))
        else:

            def op(values):
                return values

        skip = self.arc_skip.get(arc.id)

        def execute(frame: dict) -> None:
            root = self._root_of(frame)
            if skip and root is not None and skip[root] > 0:
                skip[root] -= 1
                return
            try:
                out = op(frame["values"])
            except EvaluationError as exc:
                self._dead_letter(arc.id, frame, str(exc))
                return
            if out is None:
                return
            if not _finite(out):
                self._dead_letter(arc.id, frame, "non-finite result")
                return
            self._append(dst, out, frame["origin"], prov=[arc.id, frame["seq"]], root=root)

        return execute

    def _dead_letter(self, where: str, frame: dict, why: str) -> None:
        self.counters["dead_letters"] += 1
        self.rt.trace("dead-letter", broker=self.id, at=where, space=frame.get("space"),
                      seq=frame.get("seq"), reason=why)

    # -- sequencing and routing ----------------------------------------------

    def _append(self, h: History, values, origin: str, pub=None, prov=None, root=None) -> int:
        seq = h.next_seq
        ev = {"type": "EVENT", "space": h.name, "seq": seq, "values": list(values), "origin": origin}
        if h.durable:
            rec = dict(ev)
            if pub is not None:
                rec["pub"] = pub
            if prov is not None:
                rec["prov"] = prov
                if root is not None:
                    rec["root"] = list(root)
            h.log.append(rec)
            root = (h.name, seq)
        h.events.append(ev)
        h.roots.append(root)
        if pub is not None:
            h.pubs[(origin, pub)] = seq
        self.counters["sequenced"] += 1
        self.rt.trace("seq", broker=self.id, space=h.name, seq=seq, origin=origin)
        self._route(h.name, ev, None)
        return seq

    def sequence_event(self, space: str, values, origin: str = "") -> int:
        """Validate and sequence an event into a hosted history; returns its seq."""
        h = self._hosted_history(space)
        ev = validate_event(h.schema, values, origin)
        return self._append(h, ev.values, origin)

    def _hosted_history(self, space: str) -> History:
        h = self.histories.get(space)
        if h is not None:
            return h
        if space in self.graph.spaces and self.graph.owner(space) == self.id:
            raise BrokerError(f"{space} is an interpretation, not a history", "not-history")
        raise BrokerError(f"{space} is not hosted on {self.id}", "not-hosted")

    def _interest(self, via: str, space: str) -> Interest:
        by_space = self.interest.setdefault(via, {})
        it = by_space.get(space)
        if it is None:
            sp = self.graph.spaces.get(space)
            it = by_space[space] = Interest(sp.schema if sp is not None and sp.is_history else None)
        return it

    def route_targets(self, space: str, values, via: str | None = None) -> list[str]:
        """Where a live event of ``space`` goes from here: local keys, then links."""
        out = []
        local = self.interest.get(LOCAL, {}).get(space)
        if local is not None:
            out.extend(local.matching(values))
        for peer in self.channels:
            if peer == via:
                continue
            it = self.interest.get(peer, {}).get(space)
            if it is not None and len(it) and it.any(values):
                out.append(f"link:{peer}")
        return out

    def _route(self, space: str, frame: dict, via: str | None) -> None:
        for target in self.route_targets(space, frame["values"], via):
            if target.startswith("link:"):
                peer = target[5:]
                self.link_tx[peer] += 1
                self.rt.trace("tx", frm=self.id, to=peer, space=space, seq=frame["seq"])
                self.channels[peer].send(frame)
            else:
                c = self.consumers.get(target)
                if c is not None:
                    self._consume(c, frame, None)

    def _consume(self, c: Consumer, frame: dict, rid: int | None) -> None:
        if rid is None:
            if c.state != "live":
                return
        elif rid != c.rid or c.state != "resuming":
            return
        seq = frame["seq"]
        if seq <= c.cursor or (c.until is not None and seq > c.until):
            return
        c.cursor = seq
        c.handler(frame)

    # -- subscribe protocol ---------------------------------------------------

    def _to_broker(self, dst: str, frame: dict) -> None:
        """Unicast toward broker ``dst`` (possibly this one)."""
        if dst == self.id:
            self.rt.call_later(0, lambda: self._on_inner(frame, LOCAL))
        else:
            self.channels[self.graph.next_hop(self.id, dst)].send(frame)

    def _subscribe(self, c: Consumer) -> None:
        c.rid += 1
        c.state = "resuming"
        frame = {"type": "SUBSCRIBE", "space": c.space, "key": c.key, "from": c.cursor,
                 "rid": c.rid, "dst": c.owner}
        if c.predicate is not None:
            frame["predicate"] = c.predicate
        if c.until is not None:
            frame["until"] = c.until
        self._subscribe_hop(frame, LOCAL)

    def _unsubscribe(self, c: Consumer, state: str = "paused") -> None:
        c.state = state
        c.rid += 1
        self._unsubscribe_hop({"type": "UNSUBSCRIBE", "space": c.space, "key": c.key, "dst": c.owner}, LOCAL)

    def _pred(self, space: str, text: str | None) -> Predicate | None:
        if text is None:
            return None
        sp = self.graph.spaces.get(space)
        if sp is None or not sp.is_history:
            return None
        try:
            return parse_predicate(text, sp.schema)
        except GryphonError:
            return None

    def _subscribe_hop(self, frame: dict, via: str) -> None:
        key, space = frame["key"], frame["space"]
        self.key_route[key] = via
        for other, by_space in self.interest.items():
            if other != via and space in by_space:
                by_space[space].drop(key)
        if frame.get("until") is None:
            self._interest(via, space).put(key, self._pred(space, frame.get("predicate")))
        else:
            self._interest(via, space).drop(key)
        if frame["dst"] == self.id:
            self._serve_subscribe(frame)
        else:
            self._to_broker(frame["dst"], frame)

    def _unsubscribe_hop(self, frame: dict, via: str) -> None:
        key, space = frame["key"], frame["space"]
        for by_space in self.interest.values():
            if space in by_space:
                by_space[space].drop(key)
        self.key_route.pop(key, None)
        if frame["dst"] != self.id:
            self._to_broker(frame["dst"], frame)

    def _serve_subscribe(self, frame: dict) -> None:
        if not self.ready and frame["space"] != META_SPACE:
            self.pending.append((frame, "@subscribe"))
            return
        h = self.histories.get(frame["space"])
        key, rid = frame["key"], frame.get("rid", 0)
        if h is None:
            self._send_keyed(key, {"type": "ERROR", "code": "not-hosted", "key": key, "rid": rid,
                                   "message": f"{frame['space']} is not hosted on {self.id}"})
            return
        pred = self._pred(h.name, frame.get("predicate"))
        end = h.next_seq - 1
        if frame.get("until") is not None:
            end = min(end, frame["until"])
        for ev in h.events[frame.get("from", 0):end]:
            if pred is not None:
                try:
                    if not pred.evaluate(ev["values"]):
                        continue
                except EvaluationError:
                    pass
            self._send_keyed(key, dict(ev, key=key, rid=rid))
        self._send_keyed(key, {"type": "ACK", "space": h.name, "key": key, "rid": rid, "through": end})

    def _send_keyed(self, key: str, frame: dict) -> None:
        via = self.key_route.get(key)
        if via is None:
            return
        if via == LOCAL:
            self._keyed_local(frame)
        else:
            self.channels[via].send(frame)

    def _keyed_local(self, frame: dict) -> None:
        c = self.consumers.get(frame["key"])
        if c is None:
            return
        if frame["type"] == "EVENT":
            self._consume(c, frame, frame["rid"])
        elif frame["type"] == "ACK":
            if frame["rid"] != c.rid or c.state != "resuming":
                return
            c.cursor = max(c.cursor, frame["through"])
            if c.until is not None:
                self._finish_bounded(c)
                return
            c.state = "live"
            if c.on_ready is not None:
                c.on_ready(frame["through"])
        else:
            self.rt.trace("subscribe-error", broker=self.id, key=c.key, code=frame.get("code"))

    def _finish_bounded(self, c: Consumer) -> None:
        self.consumers.pop(c.key, None)
        self.key_route.pop(c.key, None)
        self.rt.trace("arc-retired", broker=self.id, key=c.key, cursor=c.cursor)

    # -- frames in -------------------------------------------------------------

    def on_frame(self, frame: dict, src: str) -> None:
        """Entry point for every frame the runtime delivers."""
        if src in self.brokers:
            ch = self.channels.get(src)
            if ch is not None:
                ch.on_frame(frame)
            return
        self._on_client(frame, src)

    def _on_link_frame(self, frame: dict, via: str) -> None:
        self._on_inner(frame, via)

    def _on_inner(self, frame: dict, via: str) -> None:
        t = frame.get("type")
        if t == "SUBSCRIBE":
            self._subscribe_hop(frame, via)
            return
        if t == "UNSUBSCRIBE":
            self._unsubscribe_hop(frame, via)
            return
        if "key" in frame:
            route = self.key_route.get(frame["key"])
            if route == LOCAL:
                self._keyed_local(frame)
            elif route is not None and route != via:
                self.channels[route].send(frame)
            return
        dst = frame.get("dst")
        if dst is not None and dst != self.id:
            self.counters["forwarded"] += 1
            self._to_broker(dst, frame)
            return
        if t == "EVENT":
            self._route(frame["space"], frame, via)
        elif t == "PUBLISH":
            self._owner_publish(frame)
        elif t in ("ACK", "ERROR"):
            self._to_client(frame)
        elif t == "META_REQUEST":
            self._coord_request(frame)
        elif t == "META_CONFIRM":
            self._on_meta_confirm(frame)
        elif t == "CONNECT" and "notice" in frame:
            self._on_notice(frame["notice"], frame["incarnation"], via)
        else:
            log.warning("%s: dropping unexpected link frame %s", self.id, t)

    def _to_client(self, frame: dict) -> None:
        out = {k: v for k, v in frame.items() if k not in ("dst", "home")}
        client = out.get("origin", "")
        if client and client not in self.brokers:
            self._send_client(client, out)

    def _send_client(self, client: str, frame: dict) -> None:
        self.client_tx += 1
        self.rt.send(client, frame)

    def _on_client(self, frame: dict, client: str) -> None:
        t = frame.get("type")
        if frame.get("bad"):
            self._send_client(client, error_frame(frame.get("code", "bad-payload"), frame.get("message", "")))
            return
        if t == "CONNECT":
            self._send_client(client, {"type": "CONNECT", "broker": self.id, "epoch": self.epoch,
                                       "version": self.graph.version, "reply": True})
            return
        if t == "STATS":
            self._send_client(client, {"type": "STATS", "stats": self.stats()})
            return
        if t == "ACK" and "sub" in frame:
            self._session_ack(client, frame)
            return
        if t == "NACK" and "sub" in frame:
            self._session_nack(client, frame)
            return
        if t not in ("PUBLISH", "SUBSCRIBE", "UNSUBSCRIBE", "META_REQUEST"):
            self._send_client(client, error_frame("unknown-type", f"unexpected frame type {t!r}"))
            return
        if not self.ready:
            self.pending.append((frame, client))
            return
        try:
            if t == "PUBLISH":
                self._client_publish(frame, client)
            elif t == "SUBSCRIBE":
                self._open_session(frame, client)
            elif t == "UNSUBSCRIBE":
                self._close_session(f"{client}|{frame.get('sub', '')}")
            else:
                out = dict(frame, origin=client, home=self.id, dst=self.coordinator)
                self._to_broker(self.coordinator, out)
        except (KeyError, TypeError, ValueError) as exc:
            self._send_client(client, error_frame("bad-frame", f"malformed {t}: {exc}"))

    # -- publishing ------------------------------------------------------------

    def _client_publish(self, frame: dict, client: str) -> None:
        space = frame["space"]
        out = {"type": "PUBLISH", "space": space, "values": frame["values"],
               "origin": frame.get("origin") or client, "pub": frame.get("pub"),
               "home": self.id}
        self.counters["published"] += 1
        sp = self.graph.spaces.get(space)
        if sp is None:
            self._send_client(client, dict(error_frame("unknown-space", f"no space named {space!r}"),
                                           pub=out["pub"], space=space))
            return
        out["dst"] = sp.broker
        if sp.broker == self.id:
            self._owner_publish(out)
        else:
            self._to_broker(sp.broker, out)

    def _owner_publish(self, frame: dict) -> None:
        if not self.ready:
            self.pending.append((frame, "@publish"))
            return
        space, origin, pub = frame["space"], frame.get("origin", ""), frame.get("pub")
        home = frame.get("home", self.id)
        reply = {"space": space, "pub": pub, "origin": origin, "dst": home}
        try:
            h = self._hosted_history(space)
            seq = h.pubs.get((origin, pub)) if pub is not None else None
            if seq is None:
                ev = validate_event(h.schema, frame["values"], origin)
                if not _finite(ev.values):
                    raise EventError("float values must be finite", "non-finite")
                seq = self._append(h, ev.values, origin, pub=pub)
        except (BrokerError, EventError) as exc:
            out = dict(error_frame(exc.code or "error", str(exc)), **reply)
        else:
            out = dict({"type": "ACK", "seq": seq}, **reply)
        if home == self.id:
            self._to_client(out)
        else:
            self._to_broker(home, out)

    # -- restarts --------------------------------------------------------------

    def _on_peer_reset(self, peer: str, epoch: int) -> None:
        self.rt.trace("peer-restart", broker=self.id, peer=peer, epoch=epoch)
        self.interest.pop(peer, None)
        for key in [k for k, v in self.key_route.items() if v == peer]:
            del self.key_route[key]
        self._on_notice(peer, epoch, peer)

    def _on_notice(self, who: str, epoch: int, via: str) -> None:
        if (who, epoch) in self.notices:
            return
        self.notices.add((who, epoch))
        for peer, ch in self.channels.items():
            if peer != via and peer != who:
                ch.send({"type": "CONNECT", "notice": who, "incarnation": epoch})
        for key in list(self.consumers):
            c = self.consumers[key]
            if c.state not in ("live", "resuming"):
                continue
            if c.owner == who or who in self.graph.path(self.id, c.owner):
                self._subscribe(c)
        cur = self.meta_cur
        if cur is not None and self.id == self.coordinator:
            for frame in cur["outstanding"].values():
                self._to_broker(frame["dst"], frame)

    # -- client sessions -------------------------------------------------------

    def _open_session(self, frame: dict, client: str) -> None:
        space, sub = frame["space"], str(frame.get("sub", "s"))
        mode = frame.get("mode", "ordered")
        start = int(frame.get("from", 0))
        sid = f"{client}|{sub}"

        def refuse(code: str, message: str) -> None:
            self._send_client(client, dict(error_frame(code, message), space=space, sub=sub))

        sp = self.graph.spaces.get(space)
        if sp is None:
            return refuse("unknown-space", f"no space named {space!r}")
        if mode not in MODES:
            return refuse("bad-mode", f"mode must be one of {', '.join(MODES)}")
        source = self.graph.source_history(space)
        spec = sp.interp
        if spec is None and mode != "ordered":
            feeds = [a for a in self.graph.out_arcs[space] if a.type == "interpret"]
            if not feeds:
                return refuse("bad-mode", f"{mode} delivery needs a space that is or feeds an interpretation")
            spec = self.graph.spaces[feeds[0].dst].interp
        pred = frame.get("predicate")
        if pred is not None:
            if mode != "ordered":
                return refuse("bad-mode", "predicates apply to ordered subscriptions only")
            try:
                parse_predicate(pred, self.graph.spaces[source].schema)
            except GryphonError as exc:
                return refuse(exc.code or "syntax", str(exc))
        self._close_session(sid)
        s = Session(client, sub, space, source, mode, start, f"s:{sid}".replace("#", "_"),
                    self.graph.spaces[source].schema, spec=spec, chain=start, acked=start)
        if mode != "ordered":
            s.mirror = InterpState(spec)
        s.collecting = mode == "snapshot"
        s.dirty = bool(frame.get("dirty"))
        s.rto = Timer(self.rt, lambda: self._session_rto(sid))
        self.sessions[sid] = s
        c = Consumer(s.key, source, self.graph.owner(source), pred,
                     lambda f: self._session_event(sid, f),
                     cursor=0 if s.mirror is not None else start,
                     on_ready=lambda through: self._session_ready(sid))
        self.consumers[c.key] = c
        self._subscribe(c)

    def _close_session(self, sid: str) -> None:
        s = self.sessions.pop(sid, None)
        if s is None:
            return
        s.rto.cancel()
        c = self.consumers.pop(s.key, None)
        if c is not None:
            self._unsubscribe(c, "closed")

    def client_gone(self, client: str) -> None:
        """The transport lost ``client``; its sessions end."""
        for sid in [k for k, s in self.sessions.items() if s.client == client]:
            self._close_session(sid)

    def _session_event(self, sid: str, frame: dict) -> None:
        s = self.sessions.get(sid)
        if s is None:
            return
        seq = frame["seq"]
        if s.mirror is not None:
            s.mirror.apply(Event(s.schema, tuple(frame["values"]), seq))
            s.mirror.compact(seq)
            s.mirror_seq = seq
        if seq <= s.start:
            return
        if s.collecting:
            s.suffix.append(frame)
            return
        self._session_emit(s, frame)

    def _session_emit(self, s: Session, frame: dict, **extra) -> None:
        out = {"type": "EVENT", "space": s.space, "sub": s.sub, "seq": frame["seq"], "prev": s.chain,
               "values": frame["values"], "origin": frame.get("origin", ""), **extra}
        s.chain = out["seq"]
        s.sent.append(out)
        self._send_client(s.client, out)
        s.rto.arm(SESSION_RTO)

    def _snapshot_frame(self, s: Session) -> dict:
        return {"type": "SNAPSHOT", "space": s.space, "sub": s.sub, "state": s.mirror.to_doc(),
                "through": s.mirror_seq}

    def _send_snapshot(self, s: Session) -> None:
        s.chain = max(s.chain, s.mirror_seq)
        self._send_client(s.client, self._snapshot_frame(s))
        s.rto.arm(SESSION_RTO)

    def _session_ready(self, sid: str) -> None:
        s = self.sessions.get(sid)
        if s is None or not s.collecting:
            return
        s.collecting = False
        suffix, s.suffix = s.suffix, []
        if not suffix:
            return
        spec = s.spec
        if s.dirty:
            self._send_snapshot(s)
            self.rt.trace("snapshot", client=s.client, sub=s.sub, missed=len(suffix))
            return
        if not spec.expandable or spec.exact_sum_float:
            for f in suffix:
                self._session_emit(s, f)
            self.rt.trace("replay", client=s.client, sub=s.sub, missed=len(suffix))
            return
        events = compress_history(spec, [Event(s.schema, tuple(f["values"]), f["seq"]) for f in suffix])
        c = s.start
        frames = [
            {"type": "EVENT", "space": s.space, "sub": s.sub, "seq": c + i + 1, "prev": c + i,
             "values": list(e.values), "origin": "", "compressed": True}
            for i, e in enumerate(events)
        ]
        snap = self._snapshot_frame(s)
        if len(encode_frame(snap)) < sum(len(encode_frame(f)) for f in frames):
            self._send_snapshot(s)
            self.rt.trace("compress", client=s.client, sub=s.sub, missed=len(suffix), sent=0, snapshot=True)
            return
        for f in frames:
            s.sent.append(f)
            self._send_client(s.client, f)
        s.chain = c + len(frames)
        s.rto.arm(SESSION_RTO)
        self.rt.trace("compress", client=s.client, sub=s.sub, missed=len(suffix), sent=len(frames),
                      snapshot=False)

    def _session_ack(self, client: str, frame: dict) -> None:
        s = self.sessions.get(f"{client}|{frame['sub']}")
        if s is None:
            return
        through = int(frame.get("through", 0))
        if through <= s.acked:
            return
        s.acked = through
        if s.sent and s.sent[0]["seq"] <= s.acked:
            s.sent = [f for f in s.sent if f["seq"] > s.acked]
        if s.acked >= s.chain:
            s.rto.cancel()
        else:
            s.rto.rearm(SESSION_RTO)  # progress: the client is keeping up

    def _session_nack(self, client: str, frame: dict) -> None:
        s = self.sessions.get(f"{client}|{frame['sub']}")
        if s is None or s.collecting:
            return
        if s.mirror is not None:
            self._send_snapshot(s)
            return
        self._resend(s, int(frame.get("from", s.acked)))

    def _resend(self, s: Session, after: int) -> None:
        n = 0
        for f in s.sent:
            if f["seq"] > after:
                self._send_client(s.client, f)
                n += 1
                if n >= RESEND_LIMIT:
                    break
        s.rto.arm(SESSION_RTO)

    def _session_rto(self, sid: str) -> None:
        s = self.sessions.get(sid)
        if s is None or s.acked >= s.chain:
            return
        if s.mirror is not None and not s.collecting:
            self._send_snapshot(s)
        else:
            self._resend(s, s.acked)

    # -- reflection --------------------------------------------------------------

    def _on_meta_event(self, frame: dict) -> None:
        mev = MetaEvent.from_values(frame["values"])
        if not mev.confirmed:
            return
        if self.ready:
            self._activate(mev)
        else:
            self._fold(mev)

    def _fold(self, mev: MetaEvent) -> bool:
        try:
            self.graph = apply_change(self.graph, mev.kind, mev.payload)
        except GraphError as exc:
            log.error("%s: confirmed change %s does not apply: %s", self.id, mev.request_id, exc)
            return False
        if mev.kind == "add_arc":
            docs = mev.payload.get("arcs") or [mev.payload.get("arc")]
            for doc in docs:
                act = mev.activation.get(self.graph.source_history(doc["from"]))
                if act:
                    self.arc_start[doc["id"]] = act - 1
        return True

    def _activate(self, mev: MetaEvent) -> None:
        old = self.graph
        if not self._fold(mev):
            return
        g = self.graph
        for name, sp in g.spaces.items():
            if name not in old.spaces and sp.broker == self.id:
                if sp.is_history:
                    self._open_history(name)
                else:
                    self.interps[name] = InterpState(sp.interp)
        for arc_id, arc in g.arcs.items():
            if arc_id not in old.arcs and g.owner(arc.dst) == self.id:
                self._start_arc(arc, self.arc_start.get(arc_id, 0))
        for arc_id, arc in old.arcs.items():
            if arc_id in g.arcs:
                continue
            c = self.consumers.get(f"arc:{arc_id}")
            if c is None:
                continue
            act = mev.activation.get(old.source_history(arc.src))
            c.until = act - 1 if act else c.cursor
            if c.cursor >= c.until:
                self._unsubscribe(c, "retired")
                self._finish_bounded(c)
            else:
                self._subscribe(c)
        for name in old.spaces:
            if name not in g.spaces:
                self.histories.pop(name, None)
                self.interps.pop(name, None)
        self.rt.trace("activate", broker=self.id, request=mev.request_id, change=mev.kind, version=g.version)

    def _meta_append(self, mev: MetaEvent) -> int:
        return self._append(self.histories[META_SPACE], mev.values(), self.id)

    def _coord_request(self, frame: dict) -> None:
        if not self.ready:
            self.pending.append((frame, "@meta"))
            return
        rid = frame.get("request_id")
        if rid:
            # requests are idempotent by id: clients resend after losing their home broker
            rid = str(rid)
            if self.meta_cur is not None and self.meta_cur["rid"] == rid:
                self.meta_cur.update(origin=frame.get("origin", ""), home=frame.get("home", self.id))
                return
            if any(str(q.get("request_id")) == rid for q in self.meta_queue):
                return
            done = self._meta_outcome(rid)
            if done is not None:
                if frame.get("origin"):
                    self._to_broker(frame.get("home", self.id), {
                        "type": "META_CONFIRM", "phase": "result", "request_id": rid, "status": done.status,
                        "activation": done.activation, "version": self.graph.version,
                        "origin": frame["origin"], "dst": frame.get("home", self.id)})
                return
        self.meta_queue.append(frame)
        self._next_meta()

    def _meta_outcome(self, rid: str) -> MetaEvent | None:
        for ev in reversed(self.histories[META_SPACE].events):
            mev = MetaEvent.from_values(ev["values"])
            if mev.request_id == rid and mev.status != "requested":
                return mev
        return None

    def _next_meta(self) -> None:
        if self.meta_cur is not None or not self.meta_queue:
            return
        frame = self.meta_queue.pop(0)
        h = self.histories[META_SPACE]
        rid = str(frame.get("request_id") or f"req-{h.next_seq}")
        kind, payload = frame.get("kind"), frame.get("payload")
        cur = {"rid": rid, "kind": kind, "payload": payload if isinstance(payload, dict) else {},
               "origin": frame.get("origin", ""), "home": frame.get("home", self.id),
               "activation": {}, "outstanding": {}, "phase": "", "next": []}
        self.meta_cur = cur
        self._meta_append(MetaEvent(rid, str(kind), cur["payload"], "requested"))
        if not isinstance(payload, dict):
            return self._meta_finish(cur, "rejected(bad-document)", "payload must be a JSON object")
        try:
            new = apply_change(self.graph, kind, payload)
        except GraphError as exc:
            return self._meta_finish(cur, f"rejected({exc.code})", str(exc))
        if kind == "add_arc":
            added = [a for i, a in new.arcs.items() if i not in self.graph.arcs]
            cur["next"] = sorted({new.source_history(a.src) for a in added})
            self._meta_phase(cur, "barrier")
        elif kind == "remove_arc":
            gone = [a for i, a in self.graph.arcs.items() if i not in new.arcs]
            cur["next"] = sorted({self.graph.source_history(a.src) for a in gone})
            cur["outstanding"] = {
                f"pause:{a.id}": {"type": "META_CONFIRM", "phase": "pause", "request_id": rid,
                                  "arc": a.id, "dst": self.graph.owner(a.dst)}
                for a in gone
            }
            cur["phase"] = "pause"
            for f in list(cur["outstanding"].values()):
                self._to_broker(f["dst"], f)
        else:
            self._meta_finish(cur, "confirmed")

    def _meta_phase(self, cur: dict, phase: str) -> None:
        cur["phase"] = phase
        cur["outstanding"] = {
            f"barrier:{space}": {"type": "META_CONFIRM", "phase": "barrier", "request_id": cur["rid"],
                                 "space": space, "dst": self.graph.owner(space)}
            for space in cur["next"]
        }
        if not cur["outstanding"]:
            return self._meta_finish(cur, "confirmed")
        for f in list(cur["outstanding"].values()):
            self._to_broker(f["dst"], f)

    def _meta_finish(self, cur: dict, status: str, reason: str = "") -> None:
        mev = MetaEvent(cur["rid"], str(cur["kind"]), cur["payload"], status, cur["activation"])
        self._meta_append(mev)
        if mev.confirmed:
            self._activate(mev)
        result = {"type": "META_CONFIRM", "phase": "result", "request_id": cur["rid"], "status": status,
                  "activation": cur["activation"], "version": self.graph.version,
                  "origin": cur["origin"], "dst": cur["home"]}
        if reason:
            result["reason"] = reason
        self.rt.trace("meta", request=cur["rid"], change=cur["kind"], status=status,
                      activation=cur["activation"])
        self.meta_cur = None
        if cur["origin"]:
            self._to_broker(cur["home"], result)
        self._next_meta()

    def _on_meta_confirm(self, frame: dict) -> None:
        phase, rid = frame.get("phase"), frame.get("request_id")
        coord = self.coordinator
        if phase == "pause":
            if not self.ready:
                # the executor does not exist yet; answering now would not stop it
                self.pending.append((frame, "@pause"))
                return
            c = self.consumers.get(f"arc:{frame['arc']}")
            cursor = c.cursor if c is not None else 0
            if c is not None and c.state in ("live", "resuming"):
                self._unsubscribe(c, "paused")
            self._to_broker(coord, {"type": "META_CONFIRM", "phase": "paused", "request_id": rid,
                                    "arc": frame["arc"], "cursor": cursor, "dst": coord})
        elif phase == "barrier":
            h = self.histories.get(frame["space"])
            self._to_broker(coord, {"type": "META_CONFIRM", "phase": "barrier-ok", "request_id": rid,
                                    "space": frame["space"], "activation": h.next_seq if h else 1,
                                    "dst": coord})
        elif phase in ("paused", "barrier-ok"):
            cur = self.meta_cur
            if cur is None or cur["rid"] != rid:
                return
            tag = f"pause:{frame['arc']}" if phase == "paused" else f"barrier:{frame['space']}"
            if cur["outstanding"].pop(tag, None) is None:
                return
            if phase == "barrier-ok":
                cur["activation"][frame["space"]] = frame["activation"]
            if not cur["outstanding"]:
                if cur["phase"] == "pause":
                    self._meta_phase(cur, "barrier")
                else:
                    self._meta_finish(cur, "confirmed")
        elif phase == "result":
            self._to_client(frame)

    # -- introspection -------------------------------------------------------------

    def stats(self) -> dict:
        visits = matches = 0
        for it in self.interest.get(LOCAL, {}).values():
            if it.tree is not None:
                visits += it.tree.metrics.nodes_visited
                matches += it.tree.metrics.matches
        return {
            "broker": self.id,
            "epoch": self.epoch,
            "version": self.graph.version,
            "ready": self.ready,
            "spaces": {n: h.next_seq - 1 for n, h in self.histories.items()},
            "interpretations": {n: len(st) for n, st in self.interps.items()},
            "link_tx": dict(self.link_tx),
            "retransmits": {p: ch.retransmits for p, ch in self.channels.items()},
            "client_tx": self.client_tx,
            "sessions": len(self.sessions),
            "consumers": sorted(self.consumers),
            "match": {"matches": matches, "nodes_visited": visits},
            **self.counters,
        }

    @property
    def idle(self) -> bool:
        """No retransmission or delivery obligations outstanding."""
        return (
            self.ready
            and not self.pending
            and self.meta_cur is None
            and all(ch.idle for ch in self.channels.values())
            and all(s.acked >= s.chain and not s.collecting for s in self.sessions.values())
            and all(c.state != "resuming" for c in self.consumers.values())
        )
