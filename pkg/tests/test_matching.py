"""Matching tree against brute force."""

from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from strategies import TRADE
from workloads import (
    QUOTE,
    W_SCHEMA,
    brute_force,
    random_quote,
    random_quote_subscriptions,
    tree_matrix,
    w_events,
    w_subscriptions,
)

from gryphon.errors import MatchError
from gryphon.expr import parse_predicate
from gryphon.matching import (
    MatchTree,
    Subscription,
    add_subscription,
    build_matcher,
    match_event,
    remove_subscription,
    subscriptions_for,
)
from gryphon.model import Event, parse_schema

trade = parse_schema(TRADE)


def sub(sid: str, text: str, schema=trade) -> Subscription:
    (s,) = subscriptions_for(parse_predicate(text, schema), sid)
    return s


def ev(*values) -> Event:
    return Event(trade, values)


@pytest.fixture
def two_subs():
    return [sub("s1", "volume > 1000"), sub("s2", "volume > 1000 and price >= 50")]


def test_two_subscription_example(two_subs):
    tree = build_matcher(two_subs, trade)
    assert match_event(tree, ev("IBM", 50.0, 30000)) == {"s1", "s2"}
    assert match_event(tree, ev("IBM", 10.0, 500)) == set()
    assert match_event(tree, ev("IBM", 10.0, 5000)) == {"s1"}


def test_inequality_only_subs_share_the_root(two_subs):
    tree = build_matcher(two_subs, trade)
    # no equality atoms: both end at the root as residual filters
    assert tree.node_count() == 1
    assert set(tree.root.results) == {"s1", "s2"}


def test_equality_prefix_is_shared():
    subs = [sub("a", 'symbol = "IBM" and volume = 5'), sub("b", 'symbol = "IBM" and volume = 6'),
            sub("c", 'symbol = "IBM"')]
    tree = build_matcher(subs, trade)
    ibm = tree.root.edges["IBM"]
    assert "c" in ibm.results
    # price is skipped with a * edge, volume branches by value
    assert set(ibm.star.edges) == {5, 6}
    assert match_event(tree, ev("IBM", 1.0, 5)) == {"a", "c"}


def test_empty_tree_matches_nothing():
    tree = build_matcher([], trade)
    assert match_event(tree, ev("IBM", 1.0, 1)) == set()


def test_match_all_subscription():
    tree = build_matcher([sub("all", "true")], trade)
    assert tree.root.results.keys() == {"all"}
    assert match_event(tree, ev("X", -1.0, 0)) == {"all"}


def test_duplicate_id_rejected(two_subs):
    tree = build_matcher(two_subs, trade)
    with pytest.raises(MatchError):
        add_subscription(tree, sub("s1", "price > 1"))
    with pytest.raises(MatchError):
        build_matcher([two_subs[0], two_subs[0]], trade)


def test_remove_unknown_rejected():
    with pytest.raises(MatchError):
        remove_subscription(MatchTree(trade), "nope")


def test_remove_only_sub_prunes_everything():
    tree = build_matcher([sub("a", 'symbol = "IBM" and volume = 5')], trade)
    assert tree.node_count() == 4
    remove_subscription(tree, "a")
    assert tree.node_count() == 1
    assert match_event(tree, ev("IBM", 1.0, 5)) == set()


def test_remove_one_of_overlapping_pair():
    tree = build_matcher([sub("a", 'symbol = "IBM"'), sub("b", 'symbol = "IBM" and volume > 3')], trade)
    remove_subscription(tree, "a")
    assert match_event(tree, ev("IBM", 1.0, 5)) == {"b"}


def test_multi_disjunct_predicate_registers_per_disjunct():
    subs = subscriptions_for(parse_predicate('symbol = "IBM" or volume > 10', trade), "p", client="c")
    assert [s.sub_id for s in subs] == ["p#0", "p#1"]
    assert {s.client for s in subs} == {"c"}


def test_float_equality_edge_accepts_integer_literal():
    tree = build_matcher([sub("a", "price = 50")], trade)
    assert match_event(tree, ev("IBM", 50.0, 1)) == {"a"}


def test_metrics_snapshot(two_subs):
    tree = build_matcher(two_subs, trade)
    for _ in range(3):
        tree.match(ev("IBM", 50.0, 30000))
    snap = tree.metrics.snapshot()
    assert snap["matches"] == 3 and snap["subs_active"] == 2
    assert snap["nodes_visited"] == 3


def test_add_then_random_events_match_brute_force():
    subs = random_quote_subscriptions(200, seed=5)
    tree = build_matcher(subs[:-1], QUOTE)
    add_subscription(tree, subs[-1])
    rng = random.Random(6)
    rows = [random_quote(rng) for _ in range(1000)]
    events = [Event(QUOTE, r) for r in rows]
    assert np.array_equal(tree_matrix(tree, subs, events), brute_force(subs, rows))


def test_removal_matches_reduced_set():
    subs = random_quote_subscriptions(300, seed=7)
    tree = build_matcher(subs, QUOTE)
    rng = random.Random(8)
    gone = set(rng.sample([s.sub_id for s in subs], 120))
    for sid in sorted(gone):
        remove_subscription(tree, sid)
    kept = [s for s in subs if s.sub_id not in gone]
    rows = [random_quote(rng) for _ in range(1000)]
    events = [Event(QUOTE, r) for r in rows]
    assert np.array_equal(tree_matrix(tree, kept, events), brute_force(kept, rows))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_remove_then_add_is_match_equivalent(seed, pick):
    subs = random_quote_subscriptions(64, seed)
    tree = build_matcher(subs, QUOTE)
    victim = subs[pick % len(subs)]
    add_subscription(remove_subscription(tree, victim.sub_id), victim)
    rng = random.Random(seed)
    rows = [random_quote(rng) for _ in range(200)]
    events = [Event(QUOTE, r) for r in rows]
    assert np.array_equal(tree_matrix(tree, subs, events), brute_force(subs, rows))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_insertion_order_does_not_matter(seed, shuffler):
    subs = random_quote_subscriptions(64, seed)
    shuffled = list(subs)
    shuffler.shuffle(shuffled)
    a, b = build_matcher(subs, QUOTE), build_matcher(shuffled, QUOTE)
    rng = random.Random(seed)
    for _ in range(200):
        e = Event(QUOTE, random_quote(rng))
        assert a.match(e) == b.match(e)
    assert a.node_count() == b.node_count()


def test_w_family_visits_are_small():
    tree = build_matcher(w_subscriptions(512, seed=1), W_SCHEMA)
    for e in w_events(1000, seed=2):
        tree.match(e)
    assert tree.metrics.snapshot()["mean_visits"] <= 0.25 * 512
