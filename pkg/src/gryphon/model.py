"""Schemas and events.

Events are positional tuples: ``Event.values[i]`` belongs to
``schema.attributes[i]``. Values are never coerced; an ``int64`` slot
holds a Python ``int``, a ``float64`` slot a ``float``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Any

from .errors import EventError, ParseError, SchemaError

TYPES = ("int64", "float64", "string", "bool")
NUMERIC = frozenset({"int64", "float64"})
INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_SCHEMA_RE = re.compile(rf"^\s*({_IDENT})\s*\((.*)\)\s*$", re.DOTALL)
_ATTR_RE = re.compile(rf"^\s*({_IDENT})\s*:\s*(\S+)\s*$")


@dataclass(frozen=True)
class Attribute:
    name: str
    type: str


@dataclass(frozen=True)
class Schema:
    name: str
    attributes: tuple[Attribute, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if not re.fullmatch(_IDENT, self.name):
            raise SchemaError(f"bad schema name {self.name!r}", "bad-name")
        if not self.attributes:
            raise SchemaError(f"schema {self.name} has no attributes", "empty")
        index: dict[str, int] = {}
        for i, attr in enumerate(self.attributes):
            if attr.type not in TYPES:
                raise SchemaError(f"unknown type {attr.type!r} for {attr.name}", "unknown-type")
            if attr.name in index:
                raise SchemaError(f"duplicate attribute {attr.name!r}", "duplicate-attribute")
            index[attr.name] = i
        object.__setattr__(self, "_index", index)

    @classmethod
    def of(cls, name: str, *pairs: tuple[str, str]) -> Schema:
        return cls(name, tuple(Attribute(n, t) for n, t in pairs))

    def __len__(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def index(self, attr: str) -> int:
        try:
            return self._index[attr]
        except KeyError:
            raise SchemaError(f"schema {self.name} has no attribute {attr!r}", "unknown-attribute") from None

    def has(self, attr: str) -> bool:
        return attr in self._index

    def type_of(self, attr: str) -> str:
        return self.attributes[self.index(attr)].type

    def same_shape(self, other: Schema) -> bool:
        """Structural equality ignoring the schema name."""
        return self.attributes == other.attributes

    def render(self) -> str:
        inner = ", ".join(f"{a.name}:{a.type}" for a in self.attributes)
        return f"{self.name}({inner})"

    def __str__(self) -> str:
        return self.render()


def parse_schema(text: str) -> Schema:
    m = _SCHEMA_RE.match(text)
    if not m:
        raise ParseError(f"not a schema declaration: {text!r}")
    name, body = m.group(1), m.group(2)
    if not body.strip():
        raise SchemaError(f"schema {name} has no attributes", "empty")
    attrs = []
    for part in body.split(","):
        am = _ATTR_RE.match(part)
        if not am:
            raise ParseError(f"bad attribute declaration {part.strip()!r}")
        attrs.append(Attribute(am.group(1), am.group(2)))
    return Schema(name, tuple(attrs))


def value_matches(type_name: str, value: Any) -> bool:
    if type_name == "int64":
        return type(value) is int and INT64_MIN <= value <= INT64_MAX
    if type_name == "float64":
        return type(value) is float
    if type_name == "string":
        return type(value) is str
    return type(value) is bool


@dataclass(frozen=True)
class Event:
    schema: Schema
    values: tuple
    seq: int | None = None
    origin: str = ""

    def __getitem__(self, attr: str) -> Any:
        return self.values[self.schema.index(attr)]

    def with_seq(self, seq: int) -> Event:
        if self.seq is not None:
            raise EventError(f"event already sequenced at {self.seq}", "already-sequenced")
        if seq < 0:
            raise EventError("sequence numbers are non-negative", "bad-seq")
        return replace(self, seq=seq)

    def unsequenced(self) -> Event:
        return replace(self, seq=None)

    def as_dict(self) -> dict[str, Any]:
        return dict(zip(self.schema.names, self.values))


def validate_event(schema: Schema, values, origin: str = "") -> Event:
    values = tuple(values)
    if len(values) != len(schema):
        raise EventError(
            f"{schema.name} expects {len(schema)} values, got {len(values)}", "arity-mismatch"
        )
    for i, (attr, value) in enumerate(zip(schema.attributes, values)):
        if not value_matches(attr.type, value):
            raise EventError(
                f"position {i} ({attr.name}) expects {attr.type}, got {value!r}",
                "type-mismatch",
                position=i,
            )
    return Event(schema, values, None, origin)


def render_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, float):
        if math.isinf(value) or math.isnan(value):
            raise ValueError(f"no literal form for {value}")
        return repr(value)
    return str(value)
