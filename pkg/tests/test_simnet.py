"""Deterministic simulation: oracle agreement, replay, fault scripts."""

from __future__ import annotations

import copy
from collections import Counter

import pytest

from gryphon.demo import CLIENT, SINK, demo_script, fixture_path, read_trades, stocks_graph
from gryphon.errors import SimulationError
from gryphon.simnet import FAULT_KINDS, load_scenario, run_scenario

SCENARIOS = ["crash.json", "lossy.json", "optimistic.json", "reconfig.json"]


def oracle(trades) -> list[list]:
    """Single-process reading of the stocks graph: capital per trade, kept when large."""
    return [[s, p * v] for s, p, v in trades if p * v >= 1_000_000]


@pytest.fixture(scope="module")
def trades():
    return read_trades()


@pytest.fixture(scope="module")
def runs(trades):
    g = stocks_graph()
    return {seed: run_scenario(g, demo_script(trades), seed) for seed in (42, 43)}


def test_seed_42_delivers_the_oracle_once_each(runs, trades):
    t = runs[42]
    assert t.ok and t.quiescent and t.backlog == 0
    got = [d["values"] for d in t.deliveries(CLIENT, SINK)]
    assert Counter(map(tuple, got)) == Counter(map(tuple, oracle(trades)))
    seqs = [d["seq"] for d in t.deliveries(CLIENT, SINK)]
    assert len(seqs) == len(set(seqs))


def test_delivery_order_follows_the_merged_history(runs):
    for t in runs.values():
        merged = t.sim.final_history("AllTrades")
        want = [[s, p * v] for s, p, v in (e["values"] for e in merged) if p * v >= 1_000_000]
        assert [d["values"] for d in t.deliveries(CLIENT, SINK)] == want


def test_other_seed_reaches_the_same_final_contents(runs):
    a, b = (Counter(tuple(d["values"]) for d in runs[s].deliveries(CLIENT, SINK)) for s in (42, 43))
    assert a == b
    assert runs[43].ok


@pytest.mark.parametrize("name", SCENARIOS)
def test_bundled_scenarios_replay_byte_identically(name):
    script = load_scenario(fixture_path(name))
    first = run_scenario(None, copy.deepcopy(script), 7)
    again = run_scenario(None, copy.deepcopy(script), 7)
    assert first.to_jsonl() == again.to_jsonl()
    assert first.ok, first.assertions


def test_bundled_scenarios_cover_every_fault_kind():
    kinds = set()
    for name in SCENARIOS:
        kinds |= {f["kind"] for f in load_scenario(fixture_path(name)).get("faults", [])}
    assert kinds == set(FAULT_KINDS)


def test_crash_restart_loses_no_acknowledged_event():
    t = run_scenario(None, load_scenario(fixture_path("crash.json")), 11)
    assert t.assertions["durability"]["ok"]
    kinds = [r["kind"] for r in t.records]
    assert "crash" in kinds and "restart" in kinds


def test_quiescence_means_nothing_in_flight():
    t = run_scenario(None, load_scenario(fixture_path("lossy.json")), 3)
    assert t.quiescent and t.backlog == 0
    assert all(b.idle for b in t.sim.brokers.values())


def test_tick_limit_reports_the_backlog():
    t = run_scenario(None, load_scenario(fixture_path("lossy.json")), 3, tick_limit=50)
    assert not t.quiescent and t.backlog > 0
    q = t.assertions["quiescence"]
    assert not q["ok"] and f"backlog {t.backlog}" in q["detail"][0]


BAD_FAULTS = [
    {"kind": "flood", "link": "b1-b3"},
    {"kind": "crash", "broker": "b9", "tick": 5},
    {"kind": "drop", "link": "b1-b2", "seqs": [1, 2]},
    {"kind": "drop", "link": "b1b3"},
    {"kind": "crash", "broker": "b1", "tick": -1},
    {"kind": "partition", "link": "b1-b3"},
    {"kind": "reorder", "link": "b1-b3", "window": 0},
    {"kind": "drop", "link": "b1-b3", "seqs": [5, 2]},
]


@pytest.mark.parametrize("fault", BAD_FAULTS, ids=lambda f: f["kind"] + ":" + str(sorted(f)))
def test_bad_faults_rejected(fault):
    script = load_scenario(fixture_path("lossy.json"))
    script["faults"] = [fault]
    with pytest.raises(SimulationError) as info:
        run_scenario(None, script, 1)
    assert info.value.code == "bad-scenario"


def test_restart_must_follow_crash():
    script = load_scenario(fixture_path("lossy.json"))
    script["faults"] = [{"kind": "restart", "broker": "b1", "tick": 5}, {"kind": "crash", "broker": "b1", "tick": 9}]
    with pytest.raises(SimulationError, match="follow"):
        run_scenario(None, script, 1)


def test_unknown_space_rejected():
    script = load_scenario(fixture_path("lossy.json"))
    script["clients"].append({"id": "x", "broker": "b3", "subscribe": [{"space": "Nope"}]})
    with pytest.raises(SimulationError):
        run_scenario(None, script, 1)
