"""The stocks pipeline: two exchanges, merged, priced, filtered, delivered.

NYSE (b1) and NASDAQ (b2) merge into AllTrades on b3, a transform computes
``capital = price * volume`` and a select keeps capital of at least
1,000,000.  A client on b3 subscribes to BigCapitals.  Even rows of the
trade file go to NYSE and odd rows to NASDAQ.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .graph import FlowGraph, load_graph
from .optimizer import link_transmissions, rewrite_fixpoint
from .simnet import Trace, run_scenario

CLIENT = "viewer"
SINK = "BigCapitals"


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("gryphon") / "fixtures" / name))


def stocks_graph() -> FlowGraph:
    return load_graph(fixture_path("stocks_graph.json"))


def read_trades(path: str | Path | None = None) -> list[tuple[str, float, int]]:
    """Rows of ``symbol,price,volume``; a header line is skipped."""
    path = Path(path) if path is not None else fixture_path("trades.csv")
    rows = []
    with path.open(newline="") as fh:
        for n, row in enumerate(csv.reader(fh), 1):
            if not row or (n == 1 and row[0].strip().lower() == "symbol"):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{n}: expected symbol,price,volume")
            rows.append((row[0].strip(), float(row[1]), int(row[2])))
    return rows


def demo_script(trades: list[tuple[str, float, int]], every: int = 1) -> dict:
    workload = []
    for i, (symbol, price, volume) in enumerate(trades):
        client, space = ("nyse_feed", "NYSE") if i % 2 == 0 else ("nasdaq_feed", "NASDAQ")
        workload.append({"at": 10 + (i // 2) * every, "client": client, "space": space,
                         "values": [symbol, price, volume]})
    return {"clients": [{"id": CLIENT, "broker": "b3", "subscribe": [{"space": SINK}]}],
            "workload": workload,
            "assertions": ["ordered_consistency", "durability", "quiescence"]}


@dataclass
class DemoResult:
    graph: FlowGraph
    trace: Trace
    delivered: list[dict]

    @property
    def link_transmissions(self) -> int:
        return link_transmissions(self.trace)

    def jsonl(self) -> str:
        return "".join(json.dumps(d, sort_keys=True) + "\n" for d in self.delivered)


def run_stocks(trades_path: str | Path | None = None, seed: int = 0, optimize: bool = False,
               faults: list[dict] | None = None) -> DemoResult:
    g = stocks_graph()
    if optimize:
        g, _ = rewrite_fixpoint(g, protect=[SINK])
    script = demo_script(read_trades(trades_path))
    if faults:
        script["faults"] = faults
    trace = run_scenario(g, script, seed)
    delivered = [{"seq": d["seq"], "symbol": d["values"][0], "capital": d["values"][1]}
                 for d in trace.deliveries(CLIENT, SINK)]
    return DemoResult(g, trace, delivered)
