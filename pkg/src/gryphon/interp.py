"""Keyed-aggregate interpretations of event histories and their expansion.

An interpretation folds a history into one row per key.  Expansion goes
the other way: it produces *some* history whose interpretation equals a
given state.  Two aggregate families are expandable:

* ``latest(a)`` with optional ``max(a)`` / ``min(a)``
* ``count`` with ``sum(a)``

Float sums are accumulated exactly (``Fraction``) so folding is
order-insensitive bit for bit; the column value is the correctly rounded
sum.
"""

from __future__ import annotations

import json
import re
from collections.abc import Iterable
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

from .errors import InterpError, ParseError
from .model import NUMERIC, Attribute, Event, Schema

AGG_KINDS = ("latest", "max", "min", "sum", "count")
_AGG_RE = re.compile(r"^\s*(latest|max|min|sum|count)\s*\(\s*([A-Za-z_][A-Za-z0-9_]*)?\s*\)\s*$")


@dataclass(frozen=True)
class Aggregate:
    out: str
    kind: str
    attr: str | None = None

    def render(self) -> str:
        return f"{self.kind}({self.attr or ''})"


def parse_aggregate(out: str, text: str) -> Aggregate:
    m = _AGG_RE.match(text)
    if not m:
        raise ParseError(f"bad aggregate {text!r}")
    kind, attr = m.group(1), m.group(2)
    if (kind == "count") != (attr is None):
        raise ParseError(f"{kind} takes {'no' if kind == 'count' else 'one'} attribute")
    return Aggregate(out, kind, attr)


@dataclass(frozen=True)
class InterpSpec:
    input_schema: Schema
    key_attrs: tuple[str, ...]
    aggregates: tuple[Aggregate, ...]
    name: str = ""

    def __post_init__(self):
        if not self.aggregates:
            raise InterpError("an interpretation needs at least one aggregate", "no-aggregates")
        outs = [a.out for a in self.aggregates]
        if len(set(outs)) != len(outs):
            raise InterpError("aggregate output names must be unique", "duplicate-output")
        if len(set(self.key_attrs)) != len(self.key_attrs):
            raise InterpError("duplicate key attribute", "duplicate-key")
        if set(outs) & set(self.key_attrs):
            raise InterpError("key attributes and aggregate outputs overlap", "duplicate-output")
        for k in self.key_attrs:
            self.input_schema.index(k)
        for agg in self.aggregates:
            if agg.kind not in AGG_KINDS:
                raise InterpError(f"unknown aggregate {agg.kind}", "unknown-aggregate")
            if agg.kind == "count":
                continue
            if agg.attr is None or not self.input_schema.has(agg.attr):
                raise InterpError(f"{agg.render()} names a missing attribute", "unknown-attribute")
            if self.input_schema.type_of(agg.attr) not in NUMERIC:
                raise InterpError(f"{agg.render()} needs a numeric attribute", "type")

    @classmethod
    def from_doc(cls, input_schema: Schema, doc: dict, name: str = "") -> InterpSpec:
        aggs = doc.get("aggregates")
        if not isinstance(aggs, dict):
            raise ParseError("interp.aggregates must be an object of out-name -> aggregate")
        return cls(
            input_schema,
            tuple(doc.get("key", ())),
            tuple(parse_aggregate(out, text) for out, text in aggs.items()),
            name,
        )

    def to_doc(self) -> dict:
        return {
            "input": self.input_schema.name,
            "key": list(self.key_attrs),
            "aggregates": {a.out: a.render() for a in self.aggregates},
        }

    def same_as(self, other: InterpSpec) -> bool:
        return self.key_attrs == other.key_attrs and self.aggregates == other.aggregates

    @cached_property
    def state_schema(self) -> Schema:
        attrs = [Attribute(k, self.input_schema.type_of(k)) for k in self.key_attrs]
        for agg in self.aggregates:
            t = "int64" if agg.kind == "count" else self.input_schema.type_of(agg.attr)
            attrs.append(Attribute(agg.out, t))
        return Schema(self.name or f"{self.input_schema.name}_state", tuple(attrs))

    @cached_property
    def family(self) -> str | None:
        """``"latest"``, ``"count"`` or ``None`` when not expandable."""
        kinds = sorted(a.kind for a in self.aggregates)
        attrs = {a.attr for a in self.aggregates if a.kind != "count"}
        if len(attrs) != 1:
            return None
        if kinds in (["latest"], ["latest", "max"], ["latest", "min"], ["latest", "max", "min"]):
            return "latest"
        if kinds == ["count", "sum"]:
            return "count"
        return None

    @property
    def expandable(self) -> bool:
        return self.family is not None

    @cached_property
    def value_attr(self) -> str:
        if self.family is None:
            raise InterpError("aggregate set is not expandable", "not-expandable")
        return next(a.attr for a in self.aggregates if a.attr is not None)

    @cached_property
    def expansion_schema(self) -> Schema:
        attrs = [Attribute(k, self.input_schema.type_of(k)) for k in self.key_attrs]
        attrs.append(Attribute(self.value_attr, self.input_schema.type_of(self.value_attr)))
        return Schema(f"{self.state_schema.name}_x", tuple(attrs))

    @cached_property
    def exact_sum_float(self) -> bool:
        return any(
            a.kind == "sum" and self.input_schema.type_of(a.attr) == "float64" for a in self.aggregates
        )

    def _positions(self, schema: Schema) -> tuple[tuple[int, ...], tuple[int | None, ...]]:
        cache = self.__dict__.setdefault("_pos_cache", {})
        pos = cache.get(schema)
        if pos is None:
            keys = tuple(schema.index(k) for k in self.key_attrs)
            vals = tuple(None if a.attr is None else schema.index(a.attr) for a in self.aggregates)
            pos = cache[schema] = (keys, vals)
        return pos


@dataclass
class InterpState:
    """Rows keyed by key tuple; each row holds one slot per aggregate.

    ``floor`` is a sequence watermark: every event with ``seq <= floor`` is
    already incorporated.  ``seen`` holds applied seqs above the floor.
    """

    spec: InterpSpec
    rows: dict[tuple, list] = field(default_factory=dict)
    last_seq: dict[tuple, int] = field(default_factory=dict)
    floor: int = 0
    seen: set[int] = field(default_factory=set)

    def copy(self) -> InterpState:
        return InterpState(
            self.spec,
            {k: list(v) for k, v in self.rows.items()},
            dict(self.last_seq),
            self.floor,
            set(self.seen),
        )

    def apply(self, event: Event) -> bool:
        """Fold one sequenced event in place; returns False for a duplicate."""
        seq = event.seq
        if seq is None:
            raise InterpError("interpretation needs sequenced events", "missing-seq")
        if seq <= self.floor or seq in self.seen:
            return False
        self.seen.add(seq)
        key_pos, val_pos = self.spec._positions(event.schema)
        values = event.values
        key = tuple(values[i] for i in key_pos)
        row = self.rows.get(key)
        if row is None:
            row = []
            for agg, i in zip(self.spec.aggregates, val_pos):
                if agg.kind == "count":
                    row.append(1)
                elif agg.kind == "sum" and isinstance(values[i], float):
                    row.append(Fraction(values[i]))
                else:
                    row.append(values[i])
            self.rows[key] = row
            self.last_seq[key] = seq
            return True
        newer = seq > self.last_seq[key]
        for j, (agg, i) in enumerate(zip(self.spec.aggregates, val_pos)):
            kind = agg.kind
            if kind == "count":
                row[j] += 1
                continue
            v = values[i]
            if kind == "latest":
                if newer:
                    row[j] = v
            elif kind == "max":
                if v > row[j]:
                    row[j] = v
            elif kind == "min":
                if v < row[j]:
                    row[j] = v
            elif isinstance(v, float):
                row[j] += Fraction(v)
            else:
                row[j] += v
        if newer:
            self.last_seq[key] = seq
        return True

    def value_row(self, key: tuple) -> tuple:
        return tuple(float(v) if isinstance(v, Fraction) else v for v in self.rows[key])

    def table(self) -> dict[tuple, tuple]:
        return {k: self.value_row(k) for k in self.rows}

    def compact(self, through: int) -> None:
        """Raise the floor to ``through`` once every seq up to it is known applied."""
        if through > self.floor:
            self.floor = through
            self.seen = {s for s in self.seen if s > through}

    def to_doc(self) -> dict:
        rows = []
        for key in sorted(self.rows, key=_key_order):
            rows.append([list(key), [_enc(v) for v in self.rows[key]], self.last_seq[key]])
        return {"floor": self.floor, "rows": rows, "seen": sorted(self.seen)}

    def render(self) -> str:
        return json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_doc(cls, spec: InterpSpec, doc: dict) -> InterpState:
        st = cls(spec, floor=doc["floor"], seen=set(doc.get("seen", ())))
        for key, row, last in doc["rows"]:
            st.rows[tuple(key)] = [_dec(v) for v in row]
            st.last_seq[tuple(key)] = last
        return st

    def __len__(self) -> int:
        return len(self.rows)


def _enc(v):
    if isinstance(v, Fraction):
        return {"frac": f"{v.numerator}/{v.denominator}"}
    return v


def _dec(v):
    if isinstance(v, dict):
        return Fraction(v["frac"])
    return v


def _key_order(key: tuple) -> tuple:
    return tuple((type(v).__name__, v) for v in key)


def init_state(spec: InterpSpec) -> InterpState:
    return InterpState(spec)


def apply_event(state: InterpState, event: Event) -> InterpState:
    nxt = state.copy()
    nxt.apply(event)
    return nxt


def interpret_history(spec: InterpSpec, history: Iterable[Event]) -> InterpState:
    st = InterpState(spec)
    for e in history:
        st.apply(e)
    return st


def states_equal(a: InterpState, b: InterpState) -> bool:
    if not a.spec.same_as(b.spec):
        raise InterpError("states of different interpretations", "spec-mismatch")
    if a.rows.keys() != b.rows.keys():
        return False
    return all(a.value_row(k) == b.value_row(k) for k in a.rows)


def expand_state(state: InterpState) -> list[Event]:
    spec = state.spec
    family = spec.family
    if family is None:
        raise InterpError("aggregate set is not expandable", "not-expandable")
    schema = spec.expansion_schema
    cols = {a.kind: j for j, a in enumerate(spec.aggregates)}
    zero = 0.0 if schema.attributes[-1].type == "float64" else 0
    out = []
    for key in sorted(state.rows, key=_key_order):
        row = state.value_row(key)
        if family == "latest":
            latest = row[cols["latest"]]
            values = []
            for kind in ("min", "max"):
                if kind in cols:
                    v = row[cols[kind]]
                    if v != latest and v not in values:
                        values.append(v)
            values.append(latest)
        else:
            count, total = row[cols["count"]], row[cols["sum"]]
            values = [zero] * (count - 1) + [total]
        out.extend(Event(schema, key + (v,)) for v in values)
    return out


def sequence_events(events: Iterable[Event], start: int = 1) -> list[Event]:
    return [Event(e.schema, e.values, start + i, e.origin) for i, e in enumerate(events)]


def compress_history(spec: InterpSpec, history: Iterable[Event]) -> list[Event]:
    return expand_state(interpret_history(spec, history))
