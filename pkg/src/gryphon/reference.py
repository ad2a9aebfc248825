"""Single-process reference semantics for a flow graph.

Runs every arc over complete input histories, with no brokers, links or
sequencing races.  Merge destinations hold the concatenation of their
inputs, so only their contents (not their order) are meaningful.
"""

from __future__ import annotations

from .graph import FlowGraph, downstream_spaces
from .interp import InterpState
from .model import Event


def _values(e) -> list:
    return list(e["values"]) if isinstance(e, dict) else list(e)


def reference_histories(g: FlowGraph, sources: dict[str, list]) -> dict[str, list[list]]:
    """Contents of every history reachable from ``sources`` (lists of values or event dicts)."""
    out: dict[str, list[list]] = {name: [_values(e) for e in evs] for name, evs in sources.items()}
    order: list[str] = []
    for name in sources:
        for s in downstream_spaces(g, name):
            if s not in order and s not in sources:
                order.append(s)
    # a space reachable from several sources must come after all of its inputs
    rank = {s: i for i, s in enumerate(_topo(g))}
    order.sort(key=rank.__getitem__)
    for name in order:
        sp = g.spaces[name]
        if not sp.is_history:
            continue
        acc: list[list] = []
        for arc in g.in_arcs[name]:
            if arc.type == "expand":
                src = g.source_history(arc.src)
                spec = g.spaces[arc.src].interp
                schema = g.spaces[src].schema
                idx = [schema.index(k) for k in spec.key_attrs] + [schema.index(spec.value_attr)]
                acc.extend([v[i] for i in idx] for v in out.get(src, []))
                continue
            for v in out.get(arc.src, []):
                if arc.type == "select":
                    if arc.predicate is None or arc.predicate.evaluate(v):
                        acc.append(v)
                elif arc.type == "transform":
                    acc.append(list(arc.transform.apply_values(tuple(v))))
                else:
                    acc.append(v)
        out[name] = acc
    return out


def reference_state(g: FlowGraph, space: str, histories: dict[str, list[list]]) -> InterpState:
    """Interpretation ``space`` folded over its (reference) source history."""
    src = g.source_history(space)
    schema = g.spaces[src].schema
    st = InterpState(g.spaces[space].interp)
    for i, v in enumerate(histories.get(src, []), start=1):
        st.apply(Event(schema, tuple(v), i))
    return st


def _topo(g: FlowGraph) -> list[str]:
    indeg = {s: len(g.in_arcs[s]) for s in g.spaces}
    ready = [s for s in g.spaces if indeg[s] == 0]
    order = []
    while ready:
        s = ready.pop(0)
        order.append(s)
        for arc in g.out_arcs[s]:
            indeg[arc.dst] -= 1
            if indeg[arc.dst] == 0:
                ready.append(arc.dst)
    return order
