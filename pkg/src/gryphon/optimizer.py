"""Graph rewrites that move selects toward the sources.

Three rules, each removing one intermediate history:

* ``fuse_selects``: ``A -select(P1)-> B -select(P2)-> C`` becomes
  ``A -select(P1 and P2)-> C``.
* ``push_select_through_transform``: ``A -transform(T)-> B -select(P)-> C``
  becomes ``A -select(P[out := T(out)])-> B' -transform(T)-> C``.
* ``push_select_through_merge``: ``Mi -merge-> M -select(P)-> C`` becomes
  ``Mi -select(P)-> C`` for every merge input.

A space may be removed only if it is an *intermediate*: a non-durable
history with exactly the in- and out-arcs the rule rewrites, no
subscribers, and not named in the protected set.

``check_graph_equivalence`` is the oracle: it runs both graphs through the
simulator on the same random inputs and compares what each subscriber saw.
"""

from __future__ import annotations

import random
from collections import Counter
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

from .errors import RewriteError
from .expr import Predicate
from .graph import HISTORY, FlowGraph, load_graph
from .interp import states_equal
from .reflection import META_SPACE

RULE_ORDER = ("push_select_through_merge", "push_select_through_transform", "fuse_selects")


# --- applicability ---------------------------------------------------------


def protected_spaces(g: FlowGraph, protect: Iterable[str] = ()) -> set[str]:
    """Spaces no rewrite may remove: sinks, durable spaces and ``protect``."""
    keep = set(protect)
    for name, sp in g.spaces.items():
        if sp.durable or not sp.is_history or not g.out_arcs[name] or not g.in_arcs[name]:
            keep.add(name)
    keep.add(META_SPACE)
    return keep


def _intermediate(g: FlowGraph, name: str, protect: set[str]) -> bool:
    return name not in protect and g.spaces[name].kind == HISTORY and len(g.out_arcs[name]) == 1


def _fresh(names: Iterable[str], base: str) -> str:
    taken = set(names)
    if base not in taken:
        return base
    i = 2
    while f"{base}{i}" in taken:
        i += 1
    return f"{base}{i}"


def _rebuild(g: FlowGraph, doc: dict) -> FlowGraph:
    new = load_graph(doc)
    object.__setattr__(new, "version", g.version + 1)
    return new


# --- rules -----------------------------------------------------------------


def fuse_selects(g: FlowGraph, arc1: str, arc2: str, protect: Iterable[str] = ()) -> FlowGraph:
    keep = protected_spaces(g, protect)
    a1, a2 = g.arcs.get(arc1), g.arcs.get(arc2)
    if a1 is None or a2 is None or a1.type != "select" or a2.type != "select" or a1.dst != a2.src:
        raise RewriteError(f"{arc1}, {arc2} are not two chained selects")
    b = a1.dst
    if not _intermediate(g, b, keep) or len(g.in_arcs[b]) != 1:
        raise RewriteError(f"{b} is not a removable intermediate")
    pred = a1.predicate.conjoin(a2.predicate.rebind(g.spaces[a1.src].schema))
    doc = g.to_doc()
    doc["spaces"] = [s for s in doc["spaces"] if s["name"] != b]
    doc["arcs"] = [a for a in doc["arcs"] if a["id"] not in (arc1, arc2)]
    doc["arcs"].append({"id": _fresh(g.arcs, f"{arc1}_{arc2}"), "type": "select", "from": a1.src,
                        "to": a2.dst, "predicate": pred.render()})
    return _rebuild(g, doc)


def substituted_predicate(t_arc, s_arc, input_schema) -> Predicate:
    """``P`` with every output attribute replaced by its binding in ``T``."""
    outputs = set(t_arc.transform.output_schema.names)
    missing = s_arc.predicate.attributes() - outputs
    if missing:
        raise RewriteError(f"predicate uses {sorted(missing)} which the transform does not produce")
    return s_arc.predicate.rebind(input_schema, t_arc.transform.mapping())


def push_select_through_transform(g: FlowGraph, t_arc: str, s_arc: str,
                                  protect: Iterable[str] = ()) -> FlowGraph:
    keep = protected_spaces(g, protect)
    t, s = g.arcs.get(t_arc), g.arcs.get(s_arc)
    if t is None or s is None or t.type != "transform" or s.type != "select" or t.dst != s.src:
        raise RewriteError(f"{t_arc}, {s_arc} are not a transform followed by a select")
    b = t.dst
    if not _intermediate(g, b, keep) or len(g.in_arcs[b]) != 1:
        raise RewriteError(f"{b} is not a removable intermediate")
    src = g.spaces[t.src]
    pred = substituted_predicate(t, s, src.schema)
    b2 = _fresh(g.spaces, f"{b}_pre")
    doc = g.to_doc()
    doc["spaces"] = [sp for sp in doc["spaces"] if sp["name"] != b]
    doc["spaces"].append({"name": b2, "kind": "history", "schema": src.schema.name, "broker": src.broker,
                          "durable": False})
    doc["arcs"] = [a for a in doc["arcs"] if a["id"] not in (t_arc, s_arc)]
    doc["arcs"].append({"id": s_arc, "type": "select", "from": t.src, "to": b2, "predicate": pred.render()})
    doc["arcs"].append({"id": t_arc, "type": "transform", "from": b2, "to": s.dst,
                        "transform": t.transform.render()})
    return _rebuild(g, doc)


def push_select_through_merge(g: FlowGraph, s_arc: str, protect: Iterable[str] = ()) -> FlowGraph:
    keep = protected_spaces(g, protect)
    s = g.arcs.get(s_arc)
    if s is None or s.type != "select":
        raise RewriteError(f"{s_arc} is not a select")
    m = s.src
    ins = g.in_arcs[m]
    if not ins or any(a.type != "merge" for a in ins):
        raise RewriteError(f"{m} is not a merge point")
    if not _intermediate(g, m, keep):
        raise RewriteError(f"{m} is durable, subscribed or has other consumers")
    doc = g.to_doc()
    doc["spaces"] = [sp for sp in doc["spaces"] if sp["name"] != m]
    gone = {s_arc} | {a.id for a in ins}
    doc["arcs"] = [a for a in doc["arcs"] if a["id"] not in gone]
    taken = set(g.arcs)
    for a in sorted(ins, key=lambda a: a.id):
        aid = s_arc if len(ins) == 1 else _fresh(taken, f"{s_arc}_{a.id}")
        taken.add(aid)
        pred = s.predicate.rebind(g.spaces[a.src].schema)
        doc["arcs"].append({"id": aid, "type": "select", "from": a.src, "to": s.dst, "predicate": pred.render()})
    return _rebuild(g, doc)


# --- candidates and the fixpoint -----------------------------------------


@dataclass(frozen=True)
class Rewrite:
    rule: str
    arcs: tuple[str, ...]
    removed: str
    warnings: tuple[str, ...] = ()

    def to_doc(self) -> dict:
        doc = {"rule": self.rule, "arcs": list(self.arcs), "removed": self.removed}
        if self.warnings:
            doc["warnings"] = list(self.warnings)
        return doc


def candidates(g: FlowGraph, rule: str, protect: Iterable[str] = ()) -> list[Rewrite]:
    keep = protected_spaces(g, protect)
    found = []
    for aid in sorted(g.arcs):
        arc = g.arcs[aid]
        if arc.type != "select":
            continue
        up = g.in_arcs[arc.src]
        if not _intermediate(g, arc.src, keep):
            continue
        if rule == "push_select_through_merge":
            if up and all(a.type == "merge" for a in up):
                found.append(Rewrite(rule, (aid,), arc.src))
        elif len(up) == 1 and up[0].type == ("transform" if rule == "push_select_through_transform" else "select"):
            warn = ()
            if rule == "push_select_through_transform":
                try:
                    pred = substituted_predicate(up[0], arc, g.spaces[up[0].src].schema)
                except RewriteError:
                    continue
                if pred.has_division() and not arc.predicate.has_division():
                    warn = (f"{aid}: substitution introduces division; evaluation errors move upstream",)
            found.append(Rewrite(rule, (up[0].id, aid), arc.src, warn))
    return found


def apply_rewrite(g: FlowGraph, rw: Rewrite, protect: Iterable[str] = ()) -> FlowGraph:
    if rw.rule == "fuse_selects":
        return fuse_selects(g, *rw.arcs, protect=protect)
    if rw.rule == "push_select_through_transform":
        return push_select_through_transform(g, *rw.arcs, protect=protect)
    if rw.rule == "push_select_through_merge":
        return push_select_through_merge(g, *rw.arcs, protect=protect)
    raise RewriteError(f"unknown rule {rw.rule!r}")


def _ancestor_arcs(g: FlowGraph, space: str, kind: str) -> int:
    seen, todo, n = set(), [space], 0
    while todo:
        for arc in g.in_arcs[todo.pop()]:
            if arc.id in seen:
                continue
            seen.add(arc.id)
            n += arc.type == kind
            todo.append(arc.src)
    return n


def measure(g: FlowGraph) -> tuple[Counter, Counter, int]:
    """Termination measure, compared lexicographically.

    The first two parts are multisets holding, per select arc, how many
    merge (resp. transform) arcs lie upstream of it.  Pushing a select
    through a merge replaces one element by up to ``k`` strictly smaller
    ones, which is a decrease in the multiset order even though the plain
    count of selects can grow.
    """
    selects = [a for a in g.arcs.values() if a.type == "select"]
    merges = Counter(_ancestor_arcs(g, a.src, "merge") for a in selects)
    transforms = Counter(_ancestor_arcs(g, a.src, "transform") for a in selects)
    return merges, transforms, len(selects)


def multiset_less(m: Counter, n: Counter) -> bool:
    """``m < n`` in the multiset extension of ``<`` on integers."""
    if m == n:
        return False
    extra_m, extra_n = m - n, n - m
    return all(any(x > y for x in extra_n) for y in extra_m)


def measure_less(a, b) -> bool:
    for x, y in zip(a[:2], b[:2]):
        if multiset_less(x, y):
            return True
        if x != y:
            return False
    return a[2] < b[2]


def rewrite_fixpoint(g: FlowGraph, rules: Iterable[str] = RULE_ORDER, protect: Iterable[str] = (),
                     max_steps: int = 10_000) -> tuple[FlowGraph, list[Rewrite]]:
    """Apply ``rules`` in order until none applies; returns the graph and the log."""
    rules = [r for r in RULE_ORDER if r in set(rules)]
    protect = tuple(protect)
    log: list[Rewrite] = []
    m = measure(g)
    for _ in range(max_steps):
        for rule in rules:
            found = candidates(g, rule, protect)
            if found:
                rw = found[0]
                g = apply_rewrite(g, rw, protect)
                m2 = measure(g)
                if not measure_less(m2, m):
                    raise RewriteError(f"{rw.rule} on {rw.arcs} did not decrease the measure", "no-progress")
                m = m2
                log.append(rw)
                break
        else:
            return g, log
    raise RewriteError("rewriting did not reach a fixpoint", "no-progress")


# --- equivalence oracle ------------------------------------------------------


@dataclass
class Verdict:
    equivalent: bool
    trials: int
    events: int
    counterexample: dict | None = None
    link_tx: tuple[int, int] = (0, 0)

    def to_doc(self) -> dict:
        return {"equivalent": self.equivalent, "trials": self.trials, "events": self.events,
                "counterexample": self.counterexample, "link_tx": list(self.link_tx)}


SYMBOLS = ("IBM", "HPQ", "DELL", "MSFT", "ORCL")


def random_values(schema, rng: random.Random) -> list:
    out = []
    for attr in schema.attributes:
        if attr.type == "string":
            out.append(rng.choice(SYMBOLS))
        elif attr.type == "int64":
            out.append(rng.randint(1, 20_000))
        elif attr.type == "float64":
            out.append(round(rng.uniform(1.0, 500.0), 2))
        else:
            out.append(rng.random() < 0.5)
    return out


def sources(g: FlowGraph) -> list[str]:
    return sorted(n for n, sp in g.spaces.items() if sp.is_history and not g.in_arcs[n] and n != META_SPACE)


def sinks(g: FlowGraph) -> list[str]:
    return sorted(n for n in g.spaces if not g.out_arcs[n] and n != META_SPACE and g.in_arcs[n])


def _depth(g: FlowGraph) -> int:
    memo: dict[str, int] = {}

    def d(s: str) -> int:
        if s not in memo:
            memo[s] = 1 + max((d(a.src) for a in g.in_arcs[s]), default=0)
        return memo[s]

    return max((d(s) for s in g.spaces), default=1)


def _diameter(g: FlowGraph) -> int:
    return max((len(g.path(a, b)) - 1 for a in g.brokers for b in g.brokers), default=0)


def quiet_interval(*graphs: FlowGraph) -> int:
    """Ticks between publishes so each event settles before the next.

    Merges interleave their inputs in arrival order, which depends on
    placement.  Spacing the inputs beyond the pipeline latency makes the
    interleaving equal to publish order in every graph being compared.
    """
    worst = max((_depth(g) + 1) * (3 * _diameter(g) + 2) for g in graphs)
    return worst + 4


def equivalence_script(g: FlowGraph, subscribed: list[str], events: int, seed: int,
                       interval: int) -> dict:
    rng = random.Random(seed)
    srcs = sources(g)
    clients = []
    for i, space in enumerate(subscribed):
        sp = g.spaces[space]
        mode = "ordered" if sp.is_history else "optimistic"
        clients.append({"id": f"sub{i}", "broker": sp.broker, "subscribe": [{"space": space, "mode": mode}]})
    workload = []
    for i in range(events):
        space = rng.choice(srcs)
        workload.append({"at": 10 + i * interval, "client": f"pub_{space}", "broker": g.owner(space),
                         "space": space, "values": random_values(g.spaces[space].schema, rng)})
    return {"clients": clients, "workload": workload, "assertions": ["quiescence"]}


def _observe(trace, subscribed: list[str]) -> list:
    sim = trace.sim
    out = []
    for i, space in enumerate(subscribed):
        c = sim.clients[f"sub{i}"]
        sess = c.sessions[space]
        if hasattr(sess, "state"):
            out.append(("state", sess.state))
        else:
            out.append(("history", [d["values"] for d in c.deliveries[space]]))
    return out


def check_graph_equivalence(g1: FlowGraph, g2: FlowGraph, trials: int = 1, events: int = 1000,
                            subscribed: list[str] | None = None, seed: int = 0,
                            interval: int | None = None,
                            on_trial: Callable[[int, object, object], None] | None = None) -> Verdict:
    """Run both graphs on the same random inputs and compare subscribers.

    Ordered subscribers must see identical values in identical order;
    interpretation subscribers must end in equal states.  The verdict
    carries the first difference found.
    """
    from .simnet import run_scenario

    if sources(g1) != sources(g2):
        raise RewriteError("graphs have different sources", "not-comparable")
    subscribed = sorted(subscribed if subscribed is not None else sinks(g1))
    for space in subscribed:
        if space not in g1.spaces or space not in g2.spaces:
            raise RewriteError(f"subscribed space {space} is missing from one graph", "not-comparable")
    gap = interval or quiet_interval(g1, g2)
    tx = [0, 0]
    for trial in range(trials):
        tseed = seed + trial
        script = equivalence_script(g1, subscribed, events, tseed, gap)
        t1 = run_scenario(g1, script, tseed)
        t2 = run_scenario(g2, script, tseed)
        if on_trial is not None:
            on_trial(trial, t1, t2)
        tx[0] += link_transmissions(t1)
        tx[1] += link_transmissions(t2)
        for tr, label in ((t1, "left"), (t2, "right")):
            if not tr.quiescent:
                return Verdict(False, trial + 1, events, {"trial": trial, "seed": tseed,
                                                          "reason": f"{label} graph did not quiesce"}, tuple(tx))
        for space, (k1, v1), (_, v2) in zip(subscribed, _observe(t1, subscribed), _observe(t2, subscribed)):
            same = states_equal(v1, v2) if k1 == "state" else v1 == v2
            if same:
                continue
            cx = {"trial": trial, "seed": tseed, "space": space}
            if k1 == "state":
                cx.update(left=v1.to_doc(), right=v2.to_doc())
            else:
                i = next((j for j, (a, b) in enumerate(zip(v1, v2)) if a != b), min(len(v1), len(v2)))
                cx.update(index=i, left=v1[i] if i < len(v1) else None, right=v2[i] if i < len(v2) else None,
                          left_len=len(v1), right_len=len(v2))
            return Verdict(False, trial + 1, events, cx, tuple(tx))
    return Verdict(True, trials, events, None, tuple(tx))


def link_transmissions(trace) -> int:
    """Events sent across broker links, first transmissions only."""
    return sum(1 for r in trace.records if r["kind"] == "tx")


# --- random applicable graphs ---------------------------------------------------


TRADE = "trade(symbol:string, price:float64, volume:int64)"
CAPITAL = "capital(symbol:string, capital:float64)"


def _atom(rng: random.Random, schema: str) -> str:
    if schema == "capital":
        return rng.choice([f"capital >= {rng.randint(5, 400) * 10_000}", f"capital < {rng.randint(5, 400) * 10_000}",
                           f'symbol = "{rng.choice(SYMBOLS)}"', f'symbol != "{rng.choice(SYMBOLS)}"'])
    return rng.choice([f"price > {rng.randint(20, 480)}", f"price <= {rng.randint(20, 480)}.5",
                       f"volume >= {rng.randint(500, 19_000)}", f"volume < {rng.randint(500, 19_000)}",
                       f'symbol = "{rng.choice(SYMBOLS)}"', f"price * 2 > {rng.randint(40, 900)}",
                       f"volume - 1000 >= {rng.randint(0, 15_000)}"])


def random_predicate(rng: random.Random, schema: str = "trade") -> str:
    disj = [" and ".join(_atom(rng, schema) for _ in range(rng.randint(1, 2))) for _ in range(rng.randint(1, 2))]
    return " or ".join(disj)


@dataclass
class _Builder:
    rng: random.Random
    brokers: list[str]
    spaces: list[dict] = field(default_factory=list)
    arcs: list[dict] = field(default_factory=list)
    subscribed: list[str] = field(default_factory=list)

    def space(self, prefix: str, schema: str = "trade", durable: bool = False) -> str:
        name = f"{prefix}{len(self.spaces)}"
        self.spaces.append({"name": name, "kind": "history", "schema": schema,
                            "broker": self.rng.choice(self.brokers), "durable": durable})
        return name

    def arc(self, kind: str, src: str, dst: str, **op) -> None:
        self.arcs.append({"id": f"{kind[0]}{len(self.arcs)}", "type": kind, "from": src, "to": dst, **op})


def random_applicable_graph(seed: int) -> tuple[FlowGraph, list[str]]:
    """A small random graph where at least one rewrite applies.

    Returns the graph and the spaces a client subscribes to.
    """
    rng = random.Random(seed)
    n = rng.randint(2, 4)
    brokers = [f"b{i + 1}" for i in range(n)]
    links = [[brokers[i], brokers[rng.randrange(i)]] for i in range(1, n)]
    b = _Builder(rng, brokers)
    for _ in range(rng.randint(1, 2)):
        shape = rng.choice(["fuse", "transform", "merge", "pipeline"])
        if shape == "fuse":
            src = b.space("S", durable=True)
            mid = b.space("B")
            sink = b.space("C", durable=rng.random() < 0.5)
            b.arc("select", src, mid, predicate=random_predicate(rng))
            b.arc("select", mid, sink, predicate=random_predicate(rng))
        elif shape == "transform":
            src = b.space("S", durable=True)
            capital = rng.random() < 0.5
            schema = "capital" if capital else "trade"
            mid = b.space("B", schema)
            sink = b.space("C", schema, durable=rng.random() < 0.5)
            text = ("symbol := symbol, capital := price * volume" if capital
                    else "symbol := symbol, price := price + 1.5, volume := volume * 2")
            b.arc("transform", src, mid, transform=text)
            b.arc("select", mid, sink, predicate=random_predicate(rng, schema))
        elif shape == "merge":
            ins = [b.space("S", durable=True) for _ in range(rng.randint(1, 3))]
            mid = b.space("M")
            sink = b.space("C", durable=rng.random() < 0.5)
            for s in ins:
                b.arc("merge", s, mid)
            b.arc("select", mid, sink, predicate=random_predicate(rng))
        else:
            ins = [b.space("S", durable=True) for _ in range(rng.randint(2, 3))]
            merged = b.space("M")
            caps = b.space("T", "capital")
            big = b.space("B", "capital")
            sink = b.space("C", "capital", durable=rng.random() < 0.5)
            for s in ins:
                b.arc("merge", s, merged)
            b.arc("transform", merged, caps, transform="symbol := symbol, capital := price * volume")
            b.arc("select", caps, big, predicate=random_predicate(rng, "capital"))
            b.arc("select", big, sink, predicate=random_predicate(rng, "capital"))
        b.subscribed.append(sink)
        if rng.random() < 0.3 and b.spaces[-1]["schema"] == "trade":
            interp = f"I{len(b.spaces)}"
            b.spaces.append({"name": interp, "kind": "interpretation", "broker": rng.choice(brokers),
                             "interp": {"input": "trade", "key": ["symbol"],
                                        "aggregates": {"last": "latest(price)", "n": "count()"}}})
            b.arc("interpret", sink, interp)
            b.subscribed.append(interp)
    doc = {"schemas": {"trade": TRADE, "capital": CAPITAL}, "spaces": b.spaces, "arcs": b.arcs,
           "brokers": brokers, "links": links}
    return load_graph(doc), sorted(b.subscribed)


def mutate_select_constant(g: FlowGraph, seed: int = 0, samples: int = 500,
                           observe: Iterable[str] | None = None) -> FlowGraph:
    """Plant a bug: shift one numeric constant in one select predicate.

    Only a mutation that changes at least 1% of the observed contents under
    the reference semantics, on ``samples`` random inputs per source, is
    used, so the bug is observable in practice.  ``observe`` limits the histories compared
    (interpretations are judged through the history feeding them).
    """
    from collections import Counter as Multiset
    from json import dumps

    from .reference import reference_histories

    rng = random.Random(seed)
    probe = {s: [random_values(g.spaces[s].schema, rng) for _ in range(samples)] for s in sources(g)}

    def contents(graph: FlowGraph) -> dict:
        hist = reference_histories(graph, probe)
        names = sorted(hist) if watch is None else watch
        return {s: Multiset(dumps(v) for v in hist.get(s, [])) for s in names}

    watch = None if observe is None else sorted({g.source_history(s) for s in observe})
    base = contents(g)
    sites = []
    for aid in sorted(a.id for a in g.arcs.values() if a.type == "select"):
        pred = g.arcs[aid].predicate
        for i, conj in enumerate(pred.disjuncts):
            for j, atom in enumerate(conj):
                if isinstance(atom.rhs, (int, float)) and not isinstance(atom.rhs, bool):
                    sites.append((aid, i, j))
    rng.shuffle(sites)
    for aid, i, j in sites:
        pred = g.arcs[aid].predicate
        conj = list(pred.disjuncts[i])
        atom = conj[j]
        shifted = atom.rhs * 2 + 1 if atom.rhs >= 0 else atom.rhs * 2 - 1
        conj[j] = type(atom)(atom.lhs, atom.cmp, type(atom.rhs)(shifted))
        disj = list(pred.disjuncts)
        disj[i] = tuple(conj)
        doc = g.to_doc()
        for a in doc["arcs"]:
            if a["id"] == aid:
                a["predicate"] = Predicate.build(pred.schema, disj).render()
        mutated = load_graph(doc)
        got = contents(mutated)
        changed = sum(len((got[k] - base[k]) + (base[k] - got[k])) for k in base)
        if changed >= max(1, samples // 100):
            return mutated
    raise RewriteError("no select constant whose change is observable", "not-applicable")


__all__ = [
    "RULE_ORDER", "Rewrite", "Verdict", "apply_rewrite", "candidates", "check_graph_equivalence",
    "fuse_selects", "link_transmissions", "measure", "measure_less", "multiset_less", "mutate_select_constant",
    "protected_spaces", "push_select_through_merge", "push_select_through_transform", "random_applicable_graph",
    "rewrite_fixpoint", "sinks", "sources",
]
