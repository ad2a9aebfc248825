"""Matching workloads and a vectorised brute-force oracle."""

from __future__ import annotations

import random

import numpy as np

from gryphon.expr import Attr, BinOp, Lit, parse_predicate
from gryphon.matching import Subscription, subscriptions_for
from gryphon.model import Event, parse_schema

QUOTE = parse_schema("quote(symbol:string, price:float64, volume:int64, open:bool)")
W_SCHEMA = parse_schema("w(a:int64, b:int64, c:int64, d:int64)")
SYMBOLS = [f"S{i}" for i in range(8)]
W_VALUES = 64


def random_quote(rng: random.Random) -> tuple:
    # prices on a half-point grid so equality atoms actually hit
    return (rng.choice(SYMBOLS), rng.randrange(0, 64) / 2, rng.randrange(0, 1000), rng.random() < 0.5)


def random_quote_atom(rng: random.Random) -> str:
    kind = rng.randrange(6)
    cmp = rng.choice(["=", "!=", "<", "<=", ">", ">="])
    if kind == 0:
        return f"price {rng.choice(['=', '<', '>='])} {rng.randrange(0, 64) / 2}"
    if kind == 1:
        return f"volume {cmp} {rng.randrange(0, 1000)}"
    if kind == 2:
        return f"open = {rng.choice(['true', 'false'])}"
    if kind == 3:
        return f"price * volume {cmp} {rng.randrange(0, 16000)}"
    if kind == 4:
        return f"volume - price {cmp} {rng.randrange(-30, 1000)}"
    return f'symbol != "{rng.choice(SYMBOLS)}"'


def random_quote_subscriptions(n: int, seed: int) -> list[Subscription]:
    """``n`` single-disjunct subscriptions, mostly keyed by symbol."""
    rng = random.Random(seed)
    subs = []
    for i in range(n):
        atoms = [random_quote_atom(rng) for _ in range(rng.randrange(0, 3))]
        if rng.random() < 0.85:
            atoms.insert(0, f'symbol = "{rng.choice(SYMBOLS)}"')
        text = " and ".join(atoms) or "true"
        subs += subscriptions_for(parse_predicate(text, QUOTE), f"q{i}")
    return subs


def w_subscriptions(n: int, seed: int) -> list[Subscription]:
    """Family W(N): equality atoms over 64 values on each of 4 attributes.

    Every subscription fixes ``a``; each later attribute is fixed with
    probability one half and otherwise left as don't-care.
    """
    rng = random.Random(seed)
    subs = []
    for i in range(n):
        atoms = [f"a = {rng.randrange(W_VALUES)}"]
        atoms += [f"{x} = {rng.randrange(W_VALUES)}" for x in "bcd" if rng.random() < 0.5]
        subs += subscriptions_for(parse_predicate(" and ".join(atoms), W_SCHEMA), f"w{i}")
    return subs


def w_events(n: int, seed: int) -> list[Event]:
    rng = random.Random(seed)
    return [Event(W_SCHEMA, tuple(rng.randrange(W_VALUES) for _ in range(4))) for _ in range(n)]


# -- brute force -----------------------------------------------------------


def columns(schema, rows: list[tuple]) -> dict[str, np.ndarray]:
    dtypes = {"int64": np.int64, "float64": np.float64, "bool": np.bool_, "string": object}
    return {a.name: np.array([r[i] for r in rows], dtype=dtypes[a.type])
            for i, a in enumerate(schema.attributes)}


def _value(expr, cols: dict[str, np.ndarray], n: int):
    if isinstance(expr, Lit):
        return expr.value
    if isinstance(expr, Attr):
        return cols[expr.name]
    assert isinstance(expr, BinOp)
    a, b = _value(expr.left, cols, n), _value(expr.right, cols, n)
    return {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.true_divide}[expr.op](a, b)


_CMP = {"=": np.equal, "!=": np.not_equal, "<": np.less, "<=": np.less_equal,
        ">": np.greater, ">=": np.greater_equal}


def brute_force(subs: list[Subscription], rows: list[tuple]) -> np.ndarray:
    """Boolean matrix [subscription, event]: does the conjunction hold?"""
    cols = columns(subs[0].schema if subs else QUOTE, rows)
    out = np.ones((len(subs), len(rows)), dtype=bool)
    for i, sub in enumerate(subs):
        for atom in sub.conjunction:
            out[i] &= _CMP[atom.cmp](_value(atom.lhs, cols, len(rows)), atom.rhs)
    return out


def tree_matrix(tree, subs: list[Subscription], events: list[Event]) -> np.ndarray:
    index = {s.sub_id: i for i, s in enumerate(subs)}
    out = np.zeros((len(subs), len(events)), dtype=bool)
    for j, e in enumerate(events):
        for sid in tree.match(e):
            out[index[sid], j] = True
    return out
