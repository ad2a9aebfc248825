"""Interpret, expand, compress and state equality."""

from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from strategies import SYMBOLS, TRADE

from gryphon.errors import InterpError
from gryphon.interp import (
    Aggregate,
    InterpSpec,
    InterpState,
    apply_event,
    compress_history,
    expand_state,
    init_state,
    interpret_history,
    sequence_events,
    states_equal,
)
from gryphon.model import Event, parse_schema

trade = parse_schema(TRADE)


def spec(key=("symbol",), **aggs) -> InterpSpec:
    return InterpSpec.from_doc(trade, {"key": list(key), "aggregates": aggs})


LATEST_MAX = spec(last="latest(price)", high="max(price)")
COUNT_SUM = spec(n="count()", vol="sum(volume)")


def history(*rows, start: int = 1) -> list[Event]:
    return [Event(trade, r, start + i) for i, r in enumerate(rows)]


# -- oracle ----------------------------------------------------------------


def fold_oracle(sp: InterpSpec, events: list[Event]) -> dict[tuple, tuple]:
    """Recompute the table from scratch, grouping first and aggregating after."""
    names = trade.names
    groups: dict[tuple, list[Event]] = {}
    for e in {e.seq: e for e in events}.values():
        groups.setdefault(tuple(e.values[names.index(k)] for k in sp.key_attrs), []).append(e)
    table = {}
    for key, evs in groups.items():
        evs.sort(key=lambda e: e.seq)
        row = []
        for agg in sp.aggregates:
            col = [e.values[names.index(agg.attr)] for e in evs] if agg.attr else []
            if agg.kind == "count":
                row.append(len(evs))
            elif agg.kind == "latest":
                row.append(col[-1])
            elif agg.kind == "max":
                row.append(max(col))
            elif agg.kind == "min":
                row.append(min(col))
            else:
                row.append(math.fsum(col) if isinstance(col[0], float) else sum(col))
        table[key] = tuple(row)
    return table


# -- strategies ------------------------------------------------------------

prices = st.sampled_from([0.5, 1.0, 10.25, 49.99, 55.0, 60.0, 100.0, 1e-3, 3.3333])
rows = st.tuples(st.sampled_from(SYMBOLS[:3]), prices, st.integers(0, 10_000))


@st.composite
def expandable_specs(draw) -> InterpSpec:
    key = draw(st.sampled_from([(), ("symbol",)]))
    if draw(st.booleans()):
        attr = draw(st.sampled_from(["price", "volume"]))
        aggs = {"last": f"latest({attr})"}
        for kind in ("max", "min"):
            if draw(st.booleans()):
                aggs[kind] = f"{kind}({attr})"
    else:
        attr = draw(st.sampled_from(["price", "volume"]))
        aggs = {"n": "count()", "total": f"sum({attr})"}
    order = draw(st.permutations(list(aggs)))
    return spec(key, **{k: aggs[k] for k in order})


@st.composite
def any_specs(draw) -> InterpSpec:
    kinds = draw(st.lists(st.sampled_from(["latest", "max", "min", "sum", "count"]), min_size=1, max_size=4))
    aggs = {}
    for i, kind in enumerate(kinds):
        aggs[f"c{i}"] = "count()" if kind == "count" else f"{kind}({draw(st.sampled_from(['price', 'volume']))})"
    return spec(draw(st.sampled_from([(), ("symbol",)])), **aggs)


histories = st.lists(rows, max_size=40).map(lambda rs: history(*rs))


# -- examples --------------------------------------------------------------


def test_init_state_is_empty():
    assert len(init_state(LATEST_MAX)) == 0
    assert init_state(spec((), n="count()")).rows == {}


def test_missing_attribute_rejected():
    with pytest.raises(InterpError):
        spec(x="max(bid)")
    with pytest.raises(InterpError):
        spec(x="sum(symbol)")
    with pytest.raises(InterpError):
        InterpSpec(trade, ("symbol",), (Aggregate("symbol", "count", None),))


def test_latest_max_fold():
    empty = init_state(LATEST_MAX)
    one = apply_event(empty, Event(trade, ("IBM", 60.0, 1), 1))
    assert one.table() == {("IBM",): (60.0, 60.0)}
    assert len(empty) == 0  # apply_event leaves its input alone
    two = apply_event(one, Event(trade, ("IBM", 55.0, 1), 2))
    assert two.table() == {("IBM",): (55.0, 60.0)}
    assert apply_event(two, Event(trade, ("IBM", 55.0, 1), 2)) == two


def test_missing_seq_rejected():
    with pytest.raises(InterpError):
        apply_event(init_state(LATEST_MAX), Event(trade, ("IBM", 1.0, 1)))


def test_reverse_order_gives_same_state():
    h = history(("IBM", 60.0, 1), ("IBM", 55.0, 1))
    assert interpret_history(LATEST_MAX, h).table() == {("IBM",): (55.0, 60.0)}
    assert states_equal(interpret_history(LATEST_MAX, h[::-1]), interpret_history(LATEST_MAX, h))
    assert len(interpret_history(LATEST_MAX, [])) == 0


def test_states_equal_examples():
    a = interpret_history(LATEST_MAX, history(("IBM", 60.0, 1), ("IBM", 55.0, 1)))
    assert states_equal(a, a)
    b = interpret_history(LATEST_MAX, history(("IBM", 61.0, 1), ("IBM", 55.0, 1)))
    assert not states_equal(a, b)
    c = interpret_history(LATEST_MAX, history(("IBM", 60.0, 1), ("IBM", 60.0, 1), ("IBM", 55.0, 1)))
    assert states_equal(a, c)


def test_states_equal_needs_the_same_spec():
    with pytest.raises(InterpError):
        states_equal(init_state(LATEST_MAX), init_state(COUNT_SUM))


def test_expand_latest_max():
    st_ = interpret_history(LATEST_MAX, history(("IBM", 60.0, 1), ("IBM", 55.0, 1)))
    assert [e.values for e in expand_state(st_)] == [("IBM", 60.0), ("IBM", 55.0)]
    flat = interpret_history(LATEST_MAX, history(("IBM", 60.0, 1)))
    assert [e.values for e in expand_state(flat)] == [("IBM", 60.0)]


def test_expand_count_sum():
    st_ = interpret_history(COUNT_SUM, history(("IBM", 1.0, 30), ("IBM", 1.0, 50), ("IBM", 1.0, 10)))
    out = expand_state(st_)
    assert [e.values for e in out] == [("IBM", 0), ("IBM", 0), ("IBM", 90)]
    assert all(e.seq is None for e in out)


def test_expand_orders_keys_and_uses_min_max_latest():
    sp = spec(lo="min(price)", hi="max(price)", last="latest(price)")
    st_ = interpret_history(sp, history(("HPQ", 5.0, 1), ("IBM", 9.0, 1), ("IBM", 2.0, 1), ("IBM", 4.0, 1)))
    assert [e.values for e in expand_state(st_)] == [("HPQ", 5.0), ("IBM", 2.0), ("IBM", 9.0), ("IBM", 4.0)]


def test_not_expandable():
    with pytest.raises(InterpError):
        expand_state(init_state(spec(last="latest(price)", vol="sum(volume)")))
    with pytest.raises(InterpError):
        expand_state(init_state(spec(a="max(price)", b="max(volume)", c="latest(price)")))


def test_compress_example():
    h = history(("IBM", 60.0, 1), ("IBM", 58.0, 1), ("IBM", 55.0, 1))
    assert [e.values for e in compress_history(LATEST_MAX, h)] == [("IBM", 60.0), ("IBM", 55.0)]
    assert compress_history(LATEST_MAX, []) == []


def test_compress_of_canonical_history_is_a_fixpoint():
    canon = [Event(LATEST_MAX.expansion_schema, v) for v in [("HPQ", 3.0), ("IBM", 60.0), ("IBM", 55.0)]]
    assert compress_history(LATEST_MAX, sequence_events(canon)) == canon


def test_snapshot_rendering_is_key_sorted_and_round_trips():
    st_ = interpret_history(spec(n="count()", s="sum(price)"), history(("IBM", 0.1, 1), ("HPQ", 0.2, 1),
                                                                     ("IBM", 0.2, 1)))
    doc = st_.to_doc()
    assert [r[0] for r in doc["rows"]] == [["HPQ"], ["IBM"]]
    back = InterpState.from_doc(st_.spec, doc)
    assert states_equal(back, st_) and back.render() == st_.render()
    # sums are exact: 0.1 + 0.2 folds to the correctly rounded value
    assert st_.table()[("IBM",)] == (2, math.fsum([0.1, 0.2]))


# -- properties ------------------------------------------------------------


@settings(max_examples=200)
@given(any_specs(), histories)
def test_fold_matches_oracle(sp, h):
    assert interpret_history(sp, h).table() == fold_oracle(sp, h)


@settings(max_examples=200)
@given(any_specs(), histories)
def test_incremental_equals_batch_on_every_prefix(sp, h):
    st_ = init_state(sp)
    for i, e in enumerate(h):
        st_ = apply_event(st_, e)
        assert states_equal(st_, interpret_history(sp, h[: i + 1]))


@settings(max_examples=200)
@given(any_specs(), histories, st.randoms(use_true_random=False))
def test_order_insensitive(sp, h, rnd):
    shuffled = list(h)
    rnd.shuffle(shuffled)
    assert states_equal(interpret_history(sp, shuffled), interpret_history(sp, h))


@settings(max_examples=200)
@given(any_specs(), histories)
def test_applying_twice_equals_once(sp, h):
    assert states_equal(interpret_history(sp, h + h), interpret_history(sp, h))


@settings(max_examples=300)
@given(expandable_specs(), histories)
def test_round_trip_law(sp, h):
    st_ = interpret_history(sp, h)
    again = interpret_history(sp, sequence_events(expand_state(st_)))
    assert states_equal(again, st_)


@settings(max_examples=200)
@given(expandable_specs(), histories)
def test_compress_never_lengthens(sp, h):
    out = compress_history(sp, h)
    assert len(out) <= len(h)
    assert states_equal(interpret_history(sp, sequence_events(out)), interpret_history(sp, h))


@settings(max_examples=200)
@given(expandable_specs(), histories, st.integers(0, 2**32))
def test_padded_expansion_is_also_equivalent(sp, h, seed):
    """Another member of the expansion class: extra events that move nothing."""
    st_ = interpret_history(sp, h)
    canon = expand_state(st_)
    if sp.family != "latest" or not canon:
        return
    rng = random.Random(seed)
    table = st_.table()
    cols = [a.kind for a in sp.aggregates]
    padded = []
    for e in canon:
        key = e.values[:-1]
        row = table[key]
        bound = row[cols.index("max")] if "max" in cols else None
        if bound is not None and rng.random() < 0.5:
            padded.append(Event(e.schema, key + (bound,)))  # a redundant [max]
        padded.append(e)
    assert states_equal(interpret_history(sp, sequence_events(padded)), st_)
