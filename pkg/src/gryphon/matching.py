"""Content-based subscription matching.

The tree tests one attribute per level, in schema order.  A subscription
with an equality atom ``attr = c`` on the level's attribute hangs below
the ``c`` edge, otherwise below the ``*`` edge.  Its path stops after the
last attribute it constrains by equality; every other atom is a residual
filter checked at that result node.  Matching follows both the event's
value edge and the ``*`` edge at each level, so subscriptions that share
equality prefixes share the work of testing them.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable
from dataclasses import dataclass

from .errors import MatchError
from .expr import Atom, Predicate, compile_atom
from .model import Event, Schema

STAR = object()


@dataclass(frozen=True)
class Subscription:
    sub_id: str
    schema: Schema
    conjunction: tuple[Atom, ...]
    client: str = ""

    @classmethod
    def build(cls, sub_id: str, schema: Schema, atoms: Iterable[Atom], client: str = "") -> Subscription:
        pred = Predicate.build(schema, [list(atoms)])
        return cls(sub_id, schema, pred.disjuncts[0], client)

    def predicate(self) -> Predicate:
        return Predicate(self.schema, (self.conjunction,))

    def matches(self, event: Event) -> bool:
        return self.predicate().evaluate(event.values)


def subscriptions_for(pred: Predicate, base_id: str, client: str = "") -> list[Subscription]:
    """One subscription per disjunct; ids are ``base_id`` or ``base_id#i``."""
    if len(pred.disjuncts) == 1:
        return [Subscription(base_id, pred.schema, pred.disjuncts[0], client)]
    return [
        Subscription(f"{base_id}#{i}", pred.schema, conj, client) for i, conj in enumerate(pred.disjuncts)
    ]


def _edge_key(atom: Atom, schema: Schema):
    """Equality-edge key for ``atom`` or None when it must stay residual."""
    attr = atom.bare_attr
    if attr is None or atom.cmp != "=":
        return None
    t = schema.type_of(attr)
    v = atom.rhs
    if t == "int64":
        return v if type(v) is int else None
    if t == "float64":
        if type(v) is float:
            return v
        return float(v) if type(v) is int else None
    return v


class _Node:
    __slots__ = ("edges", "results", "star")

    def __init__(self):
        self.edges: dict = {}
        self.star: _Node | None = None
        self.results: dict[str, list[Callable[[tuple], bool]]] = {}

    def empty(self) -> bool:
        return not self.edges and self.star is None and not self.results


@dataclass
class MatchMetrics:
    matches: int = 0
    nodes_visited: int = 0
    subs_active: int = 0
    last_visits: int = 0

    def snapshot(self) -> dict:
        return {
            "matches": self.matches,
            "nodes_visited": self.nodes_visited,
            "subs_active": self.subs_active,
            "mean_visits": self.nodes_visited / self.matches if self.matches else 0.0,
        }


class MatchTree:
    """Mutable matcher; ``add``/``remove`` return the tree for chaining."""

    def __init__(self, schema: Schema):
        self.schema = schema
        self.root = _Node()
        self.subs: dict[str, Subscription] = {}
        self._paths: dict[str, list] = {}
        self.metrics = MatchMetrics()

    def __len__(self) -> int:
        return len(self.subs)

    def __contains__(self, sub_id: str) -> bool:
        return sub_id in self.subs

    def add(self, sub: Subscription) -> MatchTree:
        if sub.sub_id in self.subs:
            raise MatchError(f"duplicate subscription {sub.sub_id}", "duplicate")
        if not sub.schema.same_shape(self.schema):
            raise MatchError(f"subscription {sub.sub_id} is bound to another schema", "schema")
        edges: dict[int, object] = {}
        residual: list[Atom] = []
        for atom in sub.conjunction:
            key = _edge_key(atom, self.schema)
            idx = self.schema.index(atom.bare_attr) if key is not None else None
            if key is not None and idx not in edges:
                edges[idx] = key
            else:
                residual.append(atom)
        depth = max(edges) + 1 if edges else 0
        path = [edges.get(level, STAR) for level in range(depth)]
        node = self.root
        for key in path:
            if key is STAR:
                if node.star is None:
                    node.star = _Node()
                node = node.star
            else:
                node = node.edges.setdefault(key, _Node())
        node.results[sub.sub_id] = [compile_atom(a, self.schema) for a in residual]
        self.subs[sub.sub_id] = sub
        self._paths[sub.sub_id] = path
        self.metrics.subs_active = len(self.subs)
        return self

    def remove(self, sub_id: str) -> MatchTree:
        if sub_id not in self.subs:
            raise MatchError(f"unknown subscription {sub_id}", "unknown")
        path = self._paths.pop(sub_id)
        trail = [self.root]
        for key in path:
            node = trail[-1]
            trail.append(node.star if key is STAR else node.edges[key])
        del trail[-1].results[sub_id]
        # prune empty nodes bottom-up
        for level in range(len(path) - 1, -1, -1):
            child, parent, key = trail[level + 1], trail[level], path[level]
            if not child.empty():
                break
            if key is STAR:
                parent.star = None
            else:
                del parent.edges[key]
        del self.subs[sub_id]
        self.metrics.subs_active = len(self.subs)
        return self

    def match(self, event: Event) -> set[str]:
        return self.match_values(event.values)

    def match_values(self, values: tuple) -> set[str]:
        out: set[str] = set()
        visits = 0
        stack = [(self.root, 0)]
        while stack:
            node, level = stack.pop()
            visits += 1
            for sub_id, residual in node.results.items():
                if all(atom(values) for atom in residual):
                    out.add(sub_id)
            if node.star is not None:
                stack.append((node.star, level + 1))
            if node.edges:
                v = values[level]
                if v == v:
                    child = node.edges.get(v)
                    if child is not None:
                        stack.append((child, level + 1))
        self.metrics.matches += 1
        self.metrics.nodes_visited += visits
        self.metrics.last_visits = visits
        return out

    def node_count(self) -> int:
        count, stack = 0, [self.root]
        while stack:
            node = stack.pop()
            count += 1
            stack.extend(node.edges.values())
            if node.star is not None:
                stack.append(node.star)
        return count


def build_matcher(subs: Iterable[Subscription], schema: Schema) -> MatchTree:
    tree = MatchTree(schema)
    for sub in subs:
        tree.add(sub)
    return tree


def match_event(tree: MatchTree, event: Event) -> set[str]:
    return tree.match(event)


def add_subscription(tree: MatchTree, sub: Subscription) -> MatchTree:
    return tree.add(sub)


def remove_subscription(tree: MatchTree, sub_id: str) -> MatchTree:
    return tree.remove(sub_id)
