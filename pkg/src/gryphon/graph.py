"""Information flow graphs: spaces, arcs, broker placement and validation.

A graph document is one JSON object::

    {
      "schemas": {"trade": "trade(symbol:string, price:float64, volume:int64)"},
      "spaces":  [{"name": "NYSE", "kind": "history", "schema": "trade",
                   "broker": "b1", "durable": true},
                  {"name": "Hi", "kind": "interpretation", "broker": "b1",
                   "interp": {"input": "trade", "key": ["symbol"],
                              "aggregates": {"last": "latest(price)"}}}],
      "arcs":    [{"id": "a1", "type": "select", "from": "NYSE", "to": "Big",
                   "predicate": "volume > 1000"}],
      "brokers": ["b1", "b2"],
      "links":   [["b1", "b2"]]
    }

Arc types are ``select``, ``transform``, ``merge`` (identity copy; several
arcs into one history merge implicitly), ``interpret`` and ``expand``.
Interpret and expand arcs take their aggregate spec from the
interpretation space they touch.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Any

from .errors import GraphError, GryphonError
from .expr import Predicate, Transform, parse_predicate, parse_transform
from .interp import InterpSpec
from .model import Schema, parse_schema

ARC_TYPES = ("select", "transform", "merge", "interpret", "expand")
HISTORY, INTERPRETATION = "history", "interpretation"

_DOC_KEYS = {"schemas", "spaces", "arcs", "brokers", "links"}
_SPACE_KEYS = {"name", "kind", "schema", "interp", "broker", "durable"}
_ARC_KEYS = {"id", "type", "from", "to", "predicate", "transform", "interp"}


@dataclass(frozen=True)
class Space:
    name: str
    kind: str
    schema: Schema
    broker: str
    durable: bool = False
    interp: InterpSpec | None = None

    @property
    def is_history(self) -> bool:
        return self.kind == HISTORY

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {"name": self.name, "kind": self.kind, "broker": self.broker}
        if self.interp is not None:
            doc["interp"] = self.interp.to_doc()
        else:
            doc["schema"] = self.schema.name
            doc["durable"] = self.durable
        return doc


@dataclass(frozen=True)
class Arc:
    id: str
    type: str
    src: str
    dst: str
    predicate: Predicate | None = None
    transform: Transform | None = None

    def to_doc(self) -> dict:
        doc = {"id": self.id, "type": self.type, "from": self.src, "to": self.dst}
        if self.predicate is not None:
            doc["predicate"] = self.predicate.render()
        if self.transform is not None:
            doc["transform"] = self.transform.render()
        return doc

    def describe(self) -> str:
        op = self.type
        if self.predicate is not None:
            op += f"({self.predicate.render()})"
        elif self.transform is not None:
            op += f"({self.transform.render()})"
        return f"{self.id}: {self.src} -[{op}]-> {self.dst}"


@dataclass(frozen=True)
class FlowGraph:
    schemas: dict[str, Schema]
    spaces: dict[str, Space]
    arcs: dict[str, Arc]
    brokers: tuple[str, ...]
    links: tuple[tuple[str, str], ...]
    version: int = 0

    # -- structure ---------------------------------------------------------

    @cached_property
    def out_arcs(self) -> dict[str, list[Arc]]:
        out: dict[str, list[Arc]] = {name: [] for name in self.spaces}
        for arc in self.arcs.values():
            out[arc.src].append(arc)
        return out

    @cached_property
    def in_arcs(self) -> dict[str, list[Arc]]:
        inc: dict[str, list[Arc]] = {name: [] for name in self.spaces}
        for arc in self.arcs.values():
            inc[arc.dst].append(arc)
        return inc

    @cached_property
    def neighbors(self) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {b: [] for b in self.brokers}
        for a, b in self.links:
            adj[a].append(b)
            adj[b].append(a)
        return {b: sorted(n) for b, n in adj.items()}

    @cached_property
    def _next_hops(self) -> dict[tuple[str, str], str]:
        hops: dict[tuple[str, str], str] = {}
        for src in self.brokers:
            # BFS from src records the first hop toward every other broker
            frontier = [(n, n) for n in self.neighbors[src]]
            seen = {src}
            while frontier:
                nxt = []
                for node, first in frontier:
                    if node in seen:
                        continue
                    seen.add(node)
                    hops[(src, node)] = first
                    nxt.extend((m, first) for m in self.neighbors[node] if m not in seen)
                frontier = nxt
        return hops

    def next_hop(self, src: str, dst: str) -> str:
        return self._next_hops[(src, dst)]

    def path(self, src: str, dst: str) -> list[str]:
        hops = [src]
        while hops[-1] != dst:
            hops.append(self.next_hop(hops[-1], dst))
        return hops

    def owner(self, space: str) -> str:
        return self.spaces[space].broker

    @property
    def coordinator(self) -> str:
        return min(self.brokers)

    def source_history(self, space: str) -> str:
        """The history feeding an interpretation space, or the space itself."""
        sp = self.spaces[space]
        if sp.is_history:
            return space
        return self.in_arcs[space][0].src

    def interp_spec_for(self, arc: Arc) -> InterpSpec:
        if arc.type == "interpret":
            return self.spaces[arc.dst].interp
        if arc.type == "expand":
            return self.spaces[arc.src].interp
        raise GraphError(f"arc {arc.id} has no interpretation", "kind-mismatch", arc.id)

    # -- documents ---------------------------------------------------------

    def to_doc(self) -> dict:
        return {
            "schemas": {n: s.render() for n, s in self.schemas.items()},
            "spaces": [sp.to_doc() for sp in self.spaces.values()],
            "arcs": [a.to_doc() for a in self.arcs.values()],
            "brokers": list(self.brokers),
            "links": [list(link) for link in self.links],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), indent=2)

    def with_changes(self, spaces: dict[str, Space] | None = None, arcs: dict[str, Arc] | None = None,
                     schemas: dict[str, Schema] | None = None) -> FlowGraph:
        g = replace(
            self,
            spaces=self.spaces if spaces is None else spaces,
            arcs=self.arcs if arcs is None else arcs,
            schemas=self.schemas if schemas is None else schemas,
            version=self.version + 1,
        )
        validate_graph(g)
        return g


# --- loading ---------------------------------------------------------------


def _require(cond: bool, message: str, code: str = "bad-document", subject: str | None = None):
    if not cond:
        raise GraphError(message, code, subject)


def _strict(obj: Any, allowed: set[str], what: str):
    _require(isinstance(obj, dict), f"{what} must be an object")
    extra = set(obj) - allowed
    _require(not extra, f"unknown key(s) in {what}: {', '.join(sorted(extra))}")


def load_graph(document: dict | str | Path) -> FlowGraph:
    if isinstance(document, Path) or (isinstance(document, str) and not document.lstrip().startswith("{")):
        document = Path(document).read_text()
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise GraphError(f"not JSON: {exc}", "bad-document") from None
    _strict(document, _DOC_KEYS, "graph document")
    _require("spaces" in document and "brokers" in document, "graph document needs spaces and brokers")

    schemas: dict[str, Schema] = {}
    schema_docs = document.get("schemas", {})
    _require(isinstance(schema_docs, dict), "schemas must map name -> declaration")
    for name, decl in schema_docs.items():
        try:
            schema = parse_schema(decl)
        except GryphonError as exc:
            raise GraphError(f"schema {name}: {exc}", "bad-schema", name) from None
        _require(schema.name == name, f"schema key {name} declares {schema.name}", "bad-schema", name)
        schemas[name] = schema

    brokers = document["brokers"]
    _require(isinstance(brokers, list) and brokers and all(isinstance(b, str) for b in brokers),
             "brokers must be a non-empty list of names")
    _require(len(set(brokers)) == len(brokers), "duplicate broker", "duplicate")
    links = []
    for link in document.get("links", []):
        _require(isinstance(link, list) and len(link) == 2, "links are broker pairs")
        for b in link:
            _require(b in brokers, f"link names unknown broker {b}", "dangling-reference", b)
        links.append(tuple(link))

    spaces: dict[str, Space] = {}
    for sdoc in document["spaces"]:
        _strict(sdoc, _SPACE_KEYS, "space")
        name = sdoc.get("name")
        _require(isinstance(name, str), "space needs a name")
        _require(name not in spaces, f"duplicate space {name}", "duplicate", name)
        kind = sdoc.get("kind", HISTORY)
        _require(kind in (HISTORY, INTERPRETATION), f"space {name}: unknown kind {kind}", "bad-document", name)
        broker = sdoc.get("broker")
        _require(broker in brokers, f"space {name} names unknown broker {broker}", "dangling-reference", name)
        if kind == HISTORY:
            _require("interp" not in sdoc, f"history space {name} has an interp", "kind-mismatch", name)
            sname = sdoc.get("schema")
            _require(sname in schemas, f"space {name} names unknown schema {sname}", "dangling-reference", name)
            spaces[name] = Space(name, kind, schemas[sname], broker, bool(sdoc.get("durable", False)))
        else:
            _require("schema" not in sdoc, f"interpretation {name} takes its schema from interp",
                     "bad-document", name)
            _require(not sdoc.get("durable", False), f"interpretation {name} cannot be durable",
                     "kind-mismatch", name)
            idoc = sdoc.get("interp")
            _require(isinstance(idoc, dict), f"interpretation {name} needs interp", "bad-document", name)
            _strict(idoc, {"input", "key", "aggregates"}, f"interp of {name}")
            _require(idoc.get("input") in schemas, f"interp of {name} names unknown input schema",
                     "dangling-reference", name)
            try:
                spec = InterpSpec.from_doc(schemas[idoc["input"]], idoc, name)
            except GryphonError as exc:
                raise GraphError(f"interp of {name}: {exc}", "bad-interp", name) from None
            spaces[name] = Space(name, kind, spec.state_schema, broker, False, spec)

    arcs: dict[str, Arc] = {}
    for adoc in document.get("arcs", []):
        _strict(adoc, _ARC_KEYS, "arc")
        aid = adoc.get("id")
        _require(isinstance(aid, str), "arc needs an id")
        _require(aid not in arcs, f"duplicate arc {aid}", "duplicate", aid)
        atype = adoc.get("type")
        _require(atype in ARC_TYPES, f"arc {aid}: unknown type {atype}", "bad-document", aid)
        src, dst = adoc.get("from"), adoc.get("to")
        for end in (src, dst):
            _require(end in spaces, f"arc {aid} names unknown space {end}", "dangling-reference", aid)
        arcs[aid] = _build_arc(aid, atype, spaces[src], spaces[dst], adoc)

    g = FlowGraph(schemas, spaces, arcs, tuple(brokers), tuple(links))
    validate_graph(g)
    return g


def _build_arc(aid: str, atype: str, src: Space, dst: Space, adoc: dict) -> Arc:
    pred = transform = None
    try:
        if atype == "select":
            _require("predicate" in adoc, f"select arc {aid} needs a predicate", "bad-document", aid)
            pred = parse_predicate(adoc["predicate"], src.schema)
        elif atype == "transform":
            _require("transform" in adoc, f"transform arc {aid} needs a transform", "bad-document", aid)
            transform = parse_transform(adoc["transform"], src.schema, dst.schema)
        else:
            _require("predicate" not in adoc and "transform" not in adoc,
                     f"{atype} arc {aid} takes no operation text", "bad-document", aid)
    except GraphError:
        raise
    except GryphonError as exc:
        raise GraphError(f"arc {aid}: {exc}", "bad-operation", aid) from None
    return Arc(aid, atype, src.name, dst.name, pred, transform)


def _check_tree(brokers: tuple[str, ...], links: tuple[tuple[str, str], ...]):
    _require(len(links) == len(brokers) - 1, "broker links must form a tree", "not-a-tree")
    parent = {b: b for b in brokers}

    def find(b):
        while parent[b] != b:
            parent[b] = parent[parent[b]]
            b = parent[b]
        return b

    for a, b in links:
        ra, rb = find(a), find(b)
        _require(ra != rb, f"link {a}-{b} closes a loop", "not-a-tree")
        parent[ra] = rb


def find_cycle(spaces, arcs) -> list[str] | None:
    adj: dict[str, list[str]] = {s: [] for s in spaces}
    for arc in arcs:
        adj[arc.src].append(arc.dst)
    color = {s: 0 for s in spaces}
    stack: list[str] = []

    def visit(node) -> list[str] | None:
        color[node] = 1
        stack.append(node)
        for nxt in adj[node]:
            if color[nxt] == 1:
                return stack[stack.index(nxt):] + [nxt]
            if color[nxt] == 0 and (found := visit(nxt)):
                return found
        stack.pop()
        color[node] = 2
        return None

    for s in spaces:
        if color[s] == 0 and (found := visit(s)):
            return found
    return None


def validate_graph(g: FlowGraph) -> None:
    _check_tree(g.brokers, g.links)
    for sp in g.spaces.values():
        _require(sp.broker in g.brokers, f"space {sp.name} names unknown broker", "dangling-reference", sp.name)
    for arc in g.arcs.values():
        for end in (arc.src, arc.dst):
            _require(end in g.spaces, f"arc {arc.id} names unknown space {end}", "dangling-reference", arc.id)
    cycle = find_cycle(g.spaces, g.arcs.values())
    if cycle:
        raise GraphError("graph has a cycle: " + " -> ".join(cycle), "cycle", cycle[0])
    for arc in g.arcs.values():
        validate_arc(g, arc)
    for sp in g.spaces.values():
        if not sp.is_history:
            _require(len(g.in_arcs[sp.name]) <= 1, f"interpretation {sp.name} has several in-arcs",
                     "kind-mismatch", sp.name)


def validate_arc(g: FlowGraph, arc: Arc) -> None:
    src, dst = g.spaces[arc.src], g.spaces[arc.dst]

    def kinds(want_src: str, want_dst: str):
        _require(src.kind == want_src and dst.kind == want_dst,
                 f"{arc.type} arc {arc.id} needs {want_src} -> {want_dst}, got {src.kind} -> {dst.kind}",
                 "kind-mismatch", arc.id)

    def shapes(a: Schema, b: Schema):
        _require(a.same_shape(b), f"arc {arc.id}: {a.render()} does not match {b.render()}",
                 "schema-mismatch", arc.id)

    if arc.type in ("select", "merge"):
        kinds(HISTORY, HISTORY)
        shapes(src.schema, dst.schema)
        if arc.predicate is not None:
            shapes(arc.predicate.schema, src.schema)
    elif arc.type == "transform":
        kinds(HISTORY, HISTORY)
        _require(arc.transform is not None, f"transform arc {arc.id} has no transform", "bad-document", arc.id)
        shapes(arc.transform.input_schema, src.schema)
        shapes(arc.transform.output_schema, dst.schema)
    elif arc.type == "interpret":
        kinds(HISTORY, INTERPRETATION)
        shapes(dst.interp.input_schema, src.schema)
    elif arc.type == "expand":
        kinds(INTERPRETATION, HISTORY)
        spec = src.interp
        _require(spec.expandable, f"expand arc {arc.id}: interpretation is not expandable",
                 "not-expandable", arc.id)
        shapes(spec.expansion_schema, dst.schema)
    else:
        raise GraphError(f"unknown arc type {arc.type}", "bad-document", arc.id)


# --- traversal -------------------------------------------------------------


def downstream_spaces(g: FlowGraph, space: str) -> list[str]:
    """Spaces reachable from ``space`` in deterministic topological order."""
    reach: set[str] = set()
    todo = [space]
    while todo:
        for arc in g.out_arcs[todo.pop()]:
            if arc.dst not in reach:
                reach.add(arc.dst)
                todo.append(arc.dst)
    # Kahn's algorithm restricted to the reachable subgraph; ties broken
    # by declaration order so the result is stable across runs
    order_index = {name: i for i, name in enumerate(g.spaces)}
    pending = {s: 0 for s in reach}
    for s in reach | {space}:
        for arc in g.out_arcs[s]:
            pending[arc.dst] += 1
    for arc in g.out_arcs[space]:
        pending[arc.dst] -= 1
    ready = [(order_index[s], s) for s in reach if pending[s] == 0]
    heapq.heapify(ready)
    out: list[str] = []
    while ready:
        _, s = heapq.heappop(ready)
        out.append(s)
        for arc in g.out_arcs[s]:
            pending[arc.dst] -= 1
            if pending[arc.dst] == 0:
                heapq.heappush(ready, (order_index[arc.dst], arc.dst))
    return out


def downstream_closure(g: FlowGraph, space: str) -> list[tuple[Arc, str]]:
    """Each space reachable from ``space`` once, in topological order.

    A space is paired with the first arc that reaches it from the closure
    (declaration order); other arcs into a merge point are not repeated.
    """
    seen = {space}
    out = []
    for s in downstream_spaces(g, space):
        arc = next(a for a in g.in_arcs[s] if a.src in seen)
        out.append((arc, s))
        seen.add(s)
    return out
