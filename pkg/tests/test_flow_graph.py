"""Graph documents, arc rules and downstream closure."""

from __future__ import annotations

import copy
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gryphon.demo import fixture_path
from gryphon.errors import GraphError
from gryphon.graph import downstream_closure, load_graph

STOCKS = json.loads(fixture_path("stocks_graph.json").read_text())
PRICES = json.loads(fixture_path("prices_graph.json").read_text())


def doc_with(base: dict, fn) -> dict:
    d = copy.deepcopy(base)
    fn(d)
    return d


def space(d: dict, name: str) -> dict:
    return next(s for s in d["spaces"] if s["name"] == name)


def arc(d: dict, aid: str) -> dict:
    return next(a for a in d["arcs"] if a["id"] == aid)


def minimal() -> dict:
    return {"schemas": {"t": "t(x:int64)"},
            "spaces": [{"name": "A", "kind": "history", "schema": "t", "broker": "b1"}],
            "arcs": [], "brokers": ["b1"], "links": []}


def test_stocks_graph_loads():
    g = load_graph(STOCKS)
    assert sorted(g.spaces) == ["AllTrades", "BigCapitals", "Capitals", "NASDAQ", "NYSE"]
    assert len(g.arcs) == 4
    assert [a.id for a in g.in_arcs["AllTrades"]] == ["m_nyse", "m_nasdaq"]


def test_minimal_graph():
    g = load_graph(minimal())
    assert list(g.spaces) == ["A"] and not g.arcs


def test_cycle_is_reported():
    d = minimal()
    d["spaces"].append({"name": "B", "kind": "history", "schema": "t", "broker": "b1"})
    d["arcs"] = [{"id": "ab", "type": "select", "from": "A", "to": "B", "predicate": "x > 0"},
                 {"id": "ba", "type": "select", "from": "B", "to": "A", "predicate": "x > 0"}]
    with pytest.raises(GraphError) as info:
        load_graph(d)
    assert info.value.code == "cycle"
    assert "A -> B -> A" in str(info.value) or "B -> A -> B" in str(info.value)


def test_bundled_cyclic_fixture_is_rejected():
    with pytest.raises(GraphError) as info:
        load_graph(fixture_path("cyclic_graph.json"))
    assert info.value.code == "cycle"


def test_round_trip_through_document():
    g = load_graph(STOCKS)
    assert load_graph(g.to_doc()).to_doc() == g.to_doc()
    assert load_graph(g.to_json()).to_doc() == g.to_doc()


# Metamorphic checks: one edit to a valid document, one expected error code.
MUTATIONS = {
    "select-schema-mismatch": (lambda d: space(d, "BigCapitals").update({"schema": "trade"}), "schema-mismatch"),
    "transform-binds-missing-attribute": (lambda d: space(d, "Capitals").update({"schema": "trade"}), "bad-operation"),
    "dangling-arc-source": (lambda d: arc(d, "m_nyse").update({"from": "LSE"}), "dangling-reference"),
    "dangling-broker": (lambda d: space(d, "NYSE").update({"broker": "b9"}), "dangling-reference"),
    "links-not-a-tree": (lambda d: d["links"].append(["b1", "b2"]), "not-a-tree"),
    "disconnected-brokers": (lambda d: d["links"].pop(), "not-a-tree"),
    "unknown-top-level-key": (lambda d: d.update({"extra": 1}), "bad-document"),
    "unknown-space-key": (lambda d: space(d, "NYSE").update({"colour": "red"}), "bad-document"),
    "unknown-arc-type": (lambda d: arc(d, "s_big").update({"type": "join"}), "bad-document"),
    "bad-predicate": (lambda d: arc(d, "s_big").update({"predicate": "capital >"}), "bad-operation"),
    "bad-schema-text": (lambda d: d["schemas"].update({"capital": "capital(x:int32)"}), "bad-schema"),
}


@pytest.mark.parametrize("name", sorted(MUTATIONS))
def test_single_field_mutation(name):
    fn, code = MUTATIONS[name]
    with pytest.raises(GraphError) as info:
        load_graph(doc_with(STOCKS, fn))
    assert info.value.code == code, str(info.value)


def test_select_between_trade_histories_is_ok():
    d = doc_with(STOCKS, lambda d: d["arcs"].append(
        {"id": "s_ibm", "type": "select", "from": "NYSE", "to": "NASDAQ", "predicate": 'symbol = "IBM"'}))
    assert "s_ibm" in load_graph(d).arcs


def test_interpret_into_history_is_kind_mismatch():
    d = doc_with(PRICES, lambda d: arc(d, "i_prices").update({"to": "Capitals"}))
    with pytest.raises(GraphError) as info:
        load_graph(d)
    assert info.value.code == "kind-mismatch"


def test_second_arc_into_interpretation_is_rejected():
    d = doc_with(PRICES, lambda d: d["arcs"].append({"id": "i2", "type": "interpret", "from": "NYSE", "to": "Prices"}))
    with pytest.raises(GraphError):
        load_graph(d)


def test_expand_schema_is_key_plus_aggregated_attribute():
    g = load_graph(PRICES)
    assert g.spaces["PriceTicks"].schema.names == ("symbol", "price")
    assert g.spaces["Prices"].schema.names == ("symbol", "last", "high")


def test_closure_of_stocks_from_nyse():
    g = load_graph(STOCKS)
    assert [(a.id, s) for a, s in downstream_closure(g, "NYSE")] == [
        ("m_nyse", "AllTrades"), ("t_capital", "Capitals"), ("s_big", "BigCapitals")]


def test_closure_of_leaf_is_empty():
    assert downstream_closure(load_graph(STOCKS), "BigCapitals") == []


def diamond() -> dict:
    d = minimal()
    d["spaces"] = [{"name": n, "kind": "history", "schema": "t", "broker": "b1"} for n in "ABCD"]
    d["arcs"] = [{"id": f"{s}{t}", "type": "select", "from": s, "to": t, "predicate": "x > 0"}
                 for s, t in ("AB", "AC", "BD", "CD")]
    return d


def test_closure_of_diamond():
    out = downstream_closure(load_graph(diamond()), "A")
    spaces = [s for _, s in out]
    assert spaces.count("D") == 1
    assert spaces.index("D") > spaces.index("B") and spaces.index("D") > spaces.index("C")
    assert [a.id for a, _ in out] == ["AB", "AC", "BD"]


@settings(max_examples=100)
@given(st.data())
def test_closure_is_topological_and_stable(data):
    from gryphon.optimizer import random_applicable_graph
    g, _ = random_applicable_graph(data.draw(st.integers(0, 10_000)))
    start = data.draw(st.sampled_from(sorted(g.spaces)))
    out = downstream_closure(g, start)
    assert out == downstream_closure(g, start)
    position = {start: -1} | {s: i for i, (_, s) in enumerate(out)}
    assert len(position) == len(out) + 1
    for a, s in out:
        assert position[a.src] < position[s]
    for s in position:
        for a in g.out_arcs[s]:
            assert position[s] < position[a.dst]


@settings(max_examples=50)
@given(st.data())
def test_validity_does_not_depend_on_placement(data):
    d = copy.deepcopy(STOCKS)
    for s in d["spaces"]:
        s["broker"] = data.draw(st.sampled_from(d["brokers"]))
    assert load_graph(d).arcs.keys() == load_graph(STOCKS).arcs.keys()
    bad = doc_with(d, lambda d: space(d, "BigCapitals").update({"schema": "trade"}))
    with pytest.raises(GraphError):
        load_graph(bad)
