"""Graph changes carried as meta-events.

Requests and their outcomes are ordinary events in the ``__meta__``
history, owned by the coordinator (the lowest broker id).  Folding every
confirmed meta-event over the base graph reproduces the live graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import GraphError, GryphonError
from .graph import FlowGraph, load_graph
from .model import parse_schema

META_SPACE = "__meta__"
META_SCHEMA = parse_schema(
    "meta(request_id:string, kind:string, payload:string, status:string, activation:string)"
)
META_KINDS = ("add_space", "add_arc", "remove_arc", "remove_space", "add_subscription_route")


@dataclass(frozen=True)
class MetaEvent:
    request_id: str
    kind: str
    payload: dict
    status: str = "requested"
    activation: dict = field(default_factory=dict)

    @property
    def confirmed(self) -> bool:
        return self.status == "confirmed"

    def values(self) -> tuple:
        return (
            self.request_id,
            self.kind,
            json.dumps(self.payload, sort_keys=True),
            self.status,
            json.dumps(self.activation, sort_keys=True),
        )

    @classmethod
    def from_values(cls, values) -> MetaEvent:
        rid, kind, payload, status, activation = values
        return cls(rid, kind, json.loads(payload), status, json.loads(activation))


def with_meta_space(graph: FlowGraph) -> FlowGraph:
    """The graph plus the durable meta-event space on the coordinator."""
    if META_SPACE in graph.spaces:
        return graph
    doc = graph.to_doc()
    doc["schemas"][META_SCHEMA.name] = META_SCHEMA.render()
    doc["spaces"].append(
        {"name": META_SPACE, "kind": "history", "schema": META_SCHEMA.name,
         "broker": graph.coordinator, "durable": True}
    )
    g = load_graph(doc)
    return _with_version(g, graph.version)


def _with_version(g: FlowGraph, version: int) -> FlowGraph:
    object.__setattr__(g, "version", version)
    return g


def _as_list(payload: dict, key: str, single: str) -> list:
    if key in payload:
        items = payload[key]
    elif single in payload:
        items = [payload[single]]
    else:
        raise GraphError(f"payload needs {key!r} or {single!r}", "bad-document")
    if not isinstance(items, list):
        raise GraphError(f"payload {key} must be a list", "bad-document")
    return items


def affected_spaces(graph: FlowGraph, kind: str, payload: dict) -> list[str]:
    """Spaces whose sequence numbers carry the activation barrier."""
    if kind == "add_arc":
        return sorted({a["from"] for a in _as_list(payload, "arcs", "arc")})
    if kind == "remove_arc":
        ids = [a["id"] if isinstance(a, dict) else a for a in _as_list(payload, "arcs", "arc")]
        return sorted({graph.arcs[i].src for i in ids if i in graph.arcs})
    return []


def apply_change(graph: FlowGraph, kind: str, payload: dict) -> FlowGraph:
    """Return the next graph version or raise ``GraphError``."""
    if kind not in META_KINDS:
        raise GraphError(f"unknown change kind {kind!r}", "bad-document")
    if not isinstance(payload, dict):
        raise GraphError("payload must be an object", "bad-document")
    doc = graph.to_doc()
    try:
        if kind == "add_space":
            doc["schemas"].update(payload.get("schemas", {}))
            doc["spaces"].extend(_as_list(payload, "spaces", "space"))
        elif kind == "add_arc":
            doc["schemas"].update(payload.get("schemas", {}))
            doc["arcs"].extend(_as_list(payload, "arcs", "arc"))
        elif kind == "remove_arc":
            ids = {a["id"] if isinstance(a, dict) else a for a in _as_list(payload, "arcs", "arc")}
            missing = ids - set(graph.arcs)
            if missing:
                raise GraphError(f"unknown arc(s) {sorted(missing)}", "dangling-reference")
            doc["arcs"] = [a for a in doc["arcs"] if a["id"] not in ids]
        elif kind == "remove_space":
            names = {s["name"] if isinstance(s, dict) else s for s in _as_list(payload, "spaces", "space")}
            missing = names - set(graph.spaces)
            if missing:
                raise GraphError(f"unknown space(s) {sorted(missing)}", "dangling-reference")
            if META_SPACE in names:
                raise GraphError("the meta space cannot be removed", "kind-mismatch")
            doc["spaces"] = [s for s in doc["spaces"] if s["name"] not in names]
        else:
            space, broker = payload.get("space"), payload.get("broker")
            if space not in graph.spaces or broker not in graph.brokers:
                raise GraphError("subscription route names unknown space or broker", "dangling-reference")
    except GraphError:
        raise
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed payload: {exc}", "bad-document") from None
    try:
        new = load_graph(doc)
    except GraphError:
        raise
    except GryphonError as exc:
        raise GraphError(str(exc), exc.code) from None
    return _with_version(new, graph.version + 1)


def fold_meta(base: FlowGraph, events) -> FlowGraph:
    """Replay confirmed meta-events over ``base``."""
    g = with_meta_space(base)
    for ev in events:
        if ev.confirmed:
            g = apply_change(g, ev.kind, ev.payload)
    return g
