"""Arithmetic expressions, DNF predicates and per-attribute transforms.

Grammar (whitespace insensitive)::

    predicate   := "true" | conjunction ("or" conjunction)*
    conjunction := atom ("and" atom)*
    atom        := expr cmp literal
    cmp         := "=" | "==" | "!=" | "<>" | "<" | "<=" | ">" | ">=" | "≠" | "≤" | "≥"
    expr        := term (("+" | "-") term)*
    term        := factor (("*" | "/") factor)*
    factor      := number | attribute | "(" expr ")" | "-" factor
    transform   := binding (("," | ";") binding)*
    binding     := attribute ":=" expr

Numeric rules: int64 arithmetic is exact and errors outside the int64
range, ``/`` always yields float64, and mixing int64 with float64
promotes to float64, comparisons included.
"""

from __future__ import annotations

import re
from collections.abc import Callable
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Union

from .errors import EvaluationError, ParseError, TypeCheckError
from .model import INT64_MAX, INT64_MIN, NUMERIC, Event, Schema, render_value

CMP_OPS = ("=", "!=", "<", "<=", ">", ">=")
_CMP_ALIASES = {"==": "=", "<>": "!=", "≠": "!=", "≤": "<=", "≥": ">="}
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+|\d+)
  | (?P<str>"(?:\\.|[^"\\])*")
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>:=|==|!=|<>|<=|>=|[=<>≠≤≥+\-*/(),;])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise ParseError(f"unexpected character {text[pos]!r} at {pos}")
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(Token("end", "", pos))
    return tokens


# --- expression tree -------------------------------------------------------


@dataclass(frozen=True)
class Lit:
    value: Any

    def render(self) -> str:
        return render_value(self.value)


@dataclass(frozen=True)
class Attr:
    name: str

    def render(self) -> str:
        return self.name


@dataclass(frozen=True)
class BinOp:
    op: str
    left: Expr
    right: Expr

    def render(self) -> str:
        prec = _PREC[self.op]
        left = self.left.render()
        if isinstance(self.left, BinOp) and _PREC[self.left.op] < prec:
            left = f"({left})"
        right = self.right.render()
        if isinstance(self.right, BinOp) and _PREC[self.right.op] <= prec:
            right = f"({right})"
        return f"{left} {self.op} {right}"


Expr = Union[Lit, Attr, BinOp]


def attrs_of(expr: Expr) -> set[str]:
    if isinstance(expr, Attr):
        return {expr.name}
    if isinstance(expr, BinOp):
        return attrs_of(expr.left) | attrs_of(expr.right)
    return set()


def has_division(expr: Expr) -> bool:
    if isinstance(expr, BinOp):
        return expr.op == "/" or has_division(expr.left) or has_division(expr.right)
    return False


def substitute(expr: Expr, mapping: dict[str, Expr]) -> Expr:
    if isinstance(expr, Attr):
        return mapping.get(expr.name, expr)
    if isinstance(expr, BinOp):
        return BinOp(expr.op, substitute(expr.left, mapping), substitute(expr.right, mapping))
    return expr


def _literal_type(value: Any) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int64"
    if isinstance(value, float):
        return "float64"
    return "string"


def type_of(expr: Expr, schema: Schema) -> str:
    """Static type of ``expr``; string/bool only for a bare attribute."""
    if isinstance(expr, Lit):
        t = _literal_type(expr.value)
        if t not in NUMERIC:
            raise TypeCheckError(f"{t} literal inside arithmetic")
        return t
    if isinstance(expr, Attr):
        return schema.type_of(expr.name)
    lt, rt = type_of(expr.left, schema), type_of(expr.right, schema)
    for side, t in ((expr.left, lt), (expr.right, rt)):
        if t not in NUMERIC:
            raise TypeCheckError(f"{t} operand {side.render()} under {expr.op}")
    if expr.op == "/":
        return "float64"
    return "int64" if lt == rt == "int64" else "float64"


def _check_int(v: int) -> int:
    if v < INT64_MIN or v > INT64_MAX:
        raise EvaluationError(f"int64 overflow: {v}")
    return v


def _add(a, b):
    r = a + b
    return _check_int(r) if type(r) is int else r


def _sub(a, b):
    r = a - b
    return _check_int(r) if type(r) is int else r


def _mul(a, b):
    if type(a) is int and type(b) is int:
        return _check_int(a * b)
    return float(a) * float(b)


def _div(a, b):
    if b == 0:
        raise EvaluationError("division by zero")
    return float(a) / float(b)


_ARITH = {"+": _add, "-": _sub, "*": _mul, "/": _div}


def compile_expr(expr: Expr, schema: Schema) -> Callable[[tuple], Any]:
    """Closure evaluating ``expr`` against a positional value tuple."""
    if isinstance(expr, Lit):
        value = expr.value
        return lambda v: value
    if isinstance(expr, Attr):
        i = schema.index(expr.name)
        return lambda v: v[i]
    fn = _ARITH[expr.op]
    left, right = compile_expr(expr.left, schema), compile_expr(expr.right, schema)
    if expr.op in "+-":
        # mixed int/float promotes; Python already does, floats stay IEEE
        def mixed(v, fn=fn, left=left, right=right):
            a, b = left(v), right(v)
            if type(a) is not type(b):
                a, b = float(a), float(b)
            return fn(a, b)

        return mixed
    return lambda v: fn(left(v), right(v))


# --- parser ----------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def take(self) -> Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def accept(self, *texts: str) -> Token | None:
        if self.tok.kind in ("op", "ident") and self.tok.text in texts:
            return self.take()
        return None

    def expect(self, *texts: str) -> Token:
        t = self.accept(*texts)
        if t is None:
            raise ParseError(f"expected {' or '.join(texts)} at {self.tok.pos}, found {self.tok.text!r}")
        return t

    def done(self):
        if self.tok.kind != "end":
            raise ParseError(f"unexpected {self.tok.text!r} at {self.tok.pos}")

    def expr(self) -> Expr:
        node = self.term()
        while (t := self.accept("+", "-")) is not None:
            node = BinOp(t.text, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.factor()
        while (t := self.accept("*", "/")) is not None:
            right = self.factor()
            if t.text == "/" and isinstance(right, Lit) and right.value == 0:
                raise ParseError(f"division by literal zero at {t.pos}", "division-by-zero")
            node = BinOp(t.text, node, right)
        return node

    def factor(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.take()
            return Lit(_number(t.text))
        if t.kind == "ident" and t.text not in ("and", "or", "true", "false"):
            self.take()
            return Attr(t.text)
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        if self.accept("-"):
            inner = self.factor()
            if isinstance(inner, Lit):
                return Lit(-inner.value)
            return BinOp("-", Lit(0), inner)
        raise ParseError(f"expected expression at {t.pos}, found {t.text!r}")

    def literal(self) -> Any:
        t = self.tok
        neg = False
        if self.accept("-"):
            neg = True
            t = self.tok
        if t.kind == "num":
            self.take()
            v = _number(t.text)
            return -v if neg else v
        if neg:
            raise ParseError(f"expected number after '-' at {t.pos}")
        if t.kind == "str":
            self.take()
            return re.sub(r"\\(.)", r"\1", t.text[1:-1])
        if t.kind == "ident" and t.text in ("true", "false"):
            self.take()
            return t.text == "true"
        raise ParseError(f"expected literal at {t.pos}, found {t.text!r}")

    def cmp(self) -> str:
        t = self.tok
        if t.kind == "op" and (t.text in CMP_OPS or t.text in _CMP_ALIASES):
            self.take()
            return _CMP_ALIASES.get(t.text, t.text)
        raise ParseError(f"expected comparison at {t.pos}, found {t.text!r}")


def _number(text: str) -> int | float:
    if re.fullmatch(r"\d+", text):
        return int(text)
    return float(text)


# --- predicates ------------------------------------------------------------

_OP_RANK = {op: i for i, op in enumerate(CMP_OPS)}


@dataclass(frozen=True)
class Atom:
    lhs: Expr
    cmp: str
    rhs: Any

    def render(self) -> str:
        return f"{self.lhs.render()} {self.cmp} {render_value(self.rhs)}"

    @property
    def bare_attr(self) -> str | None:
        return self.lhs.name if isinstance(self.lhs, Attr) else None

    def sort_key(self, schema: Schema) -> tuple:
        idx = tuple(sorted(schema.index(a) for a in attrs_of(self.lhs)))
        return (idx, _OP_RANK[self.cmp], self.lhs.render(), _literal_type(self.rhs), self.rhs)


def _compare(cmp: str, a, b) -> bool:
    if type(a) is not type(b) and not isinstance(a, (str, bool)):
        a, b = float(a), float(b)
    if cmp == "=":
        return a == b
    if cmp == "!=":
        return a != b
    if cmp == "<":
        return a < b
    if cmp == "<=":
        return a <= b
    if cmp == ">":
        return a > b
    return a >= b


def check_atom(atom: Atom, schema: Schema) -> None:
    if atom.cmp not in CMP_OPS:
        raise ParseError(f"unknown comparison {atom.cmp!r}")
    for name in attrs_of(atom.lhs):
        schema.index(name)
    rt = _literal_type(atom.rhs)
    if isinstance(atom.lhs, Attr):
        lt = schema.type_of(atom.lhs.name)
        if lt not in NUMERIC:
            if atom.cmp not in ("=", "!="):
                raise TypeCheckError(f"{lt} attribute {atom.lhs.name} under {atom.cmp}")
            if rt != lt:
                raise TypeCheckError(f"{lt} attribute {atom.lhs.name} compared with {rt} literal")
            return
    type_of(atom.lhs, schema)
    if rt not in NUMERIC:
        raise TypeCheckError(f"numeric expression {atom.lhs.render()} compared with {rt} literal")


def compile_atom(atom: Atom, schema: Schema) -> Callable[[tuple], bool]:
    lhs = compile_expr(atom.lhs, schema)
    rhs, cmp = atom.rhs, atom.cmp
    return lambda v: _compare(cmp, lhs(v), rhs)


@dataclass(frozen=True)
class Predicate:
    """Disjunctive normal form bound to ``schema``.

    A disjunct with no atoms is vacuously true; ``Predicate.true(s)``
    builds the match-all predicate.
    """

    schema: Schema
    disjuncts: tuple[tuple[Atom, ...], ...]

    @classmethod
    def build(cls, schema: Schema, disjuncts) -> Predicate:
        conj_set = {}
        for conj in disjuncts:
            for atom in conj:
                check_atom(atom, schema)
            atoms = tuple(sorted(set(conj), key=lambda a: a.sort_key(schema)))
            conj_set[atoms] = None
        if not conj_set:
            raise ParseError("predicate needs at least one disjunct")
        if () in conj_set:
            return cls(schema, ((),))
        ordered = sorted(conj_set, key=lambda c: [a.sort_key(schema) for a in c])
        return cls(schema, tuple(ordered))

    @classmethod
    def true(cls, schema: Schema) -> Predicate:
        return cls(schema, ((),))

    @property
    def is_true(self) -> bool:
        return self.disjuncts == ((),)

    def render(self) -> str:
        if self.is_true:
            return "true"
        return " or ".join(" and ".join(a.render() for a in conj) for conj in self.disjuncts)

    def __str__(self) -> str:
        return self.render()

    @cached_property
    def _compiled(self):
        return [[compile_atom(a, self.schema) for a in conj] for conj in self.disjuncts]

    def evaluate(self, values: tuple) -> bool:
        for conj in self._compiled:
            if all(atom(values) for atom in conj):
                return True
        return False

    def attributes(self) -> set[str]:
        return {name for conj in self.disjuncts for a in conj for name in attrs_of(a.lhs)}

    def has_division(self) -> bool:
        return any(has_division(a.lhs) for conj in self.disjuncts for a in conj)

    def conjoin(self, other: Predicate) -> Predicate:
        """``self and other`` distributed back into DNF."""
        if not other.schema.same_shape(self.schema):
            raise TypeCheckError("conjoined predicates bind different schemas")
        return Predicate.build(
            self.schema, [c1 + c2 for c1 in self.disjuncts for c2 in other.disjuncts]
        )

    def rebind(self, schema: Schema, mapping: dict[str, Expr] | None = None) -> Predicate:
        """Substitute attribute references and re-check against ``schema``."""
        mapping = mapping or {}
        return Predicate.build(
            schema,
            [[Atom(substitute(a.lhs, mapping), a.cmp, a.rhs) for a in conj] for conj in self.disjuncts],
        )


def parse_predicate(text: str, schema: Schema) -> Predicate:
    p = _Parser(text)
    if p.accept("true") is not None:
        p.done()
        return Predicate.true(schema)
    disjuncts = []
    while True:
        conj = []
        while True:
            lhs = p.expr()
            cmp = p.cmp()
            conj.append(Atom(lhs, cmp, p.literal()))
            if p.accept("and") is None:
                break
        disjuncts.append(conj)
        if p.accept("or") is None:
            break
    p.done()
    return Predicate.build(schema, disjuncts)


def eval_predicate(pred: Predicate, event: Event) -> bool:
    return pred.evaluate(event.values)


# --- transforms ------------------------------------------------------------


@dataclass(frozen=True)
class Transform:
    input_schema: Schema
    output_schema: Schema
    bindings: tuple[Expr, ...]

    def __post_init__(self):
        if len(self.bindings) != len(self.output_schema):
            raise TypeCheckError("every output attribute needs exactly one binding")
        for attr, expr in zip(self.output_schema.attributes, self.bindings):
            if attr.type in NUMERIC:
                t = type_of(expr, self.input_schema)
                if t not in NUMERIC:
                    raise TypeCheckError(f"{attr.name} := {expr.render()} is not numeric")
                if attr.type == "int64" and t != "int64":
                    raise TypeCheckError(f"{attr.name} is int64 but {expr.render()} is {t}")
            else:
                if not isinstance(expr, Attr):
                    raise TypeCheckError(f"{attr.type} output {attr.name} must copy an attribute")
                if self.input_schema.type_of(expr.name) != attr.type:
                    raise TypeCheckError(f"{attr.name} copies {expr.name} of a different type")

    def binding(self, out: str) -> Expr:
        return self.bindings[self.output_schema.index(out)]

    def mapping(self) -> dict[str, Expr]:
        return dict(zip(self.output_schema.names, self.bindings))

    def render(self) -> str:
        return ", ".join(f"{n} := {e.render()}" for n, e in zip(self.output_schema.names, self.bindings))

    def __str__(self) -> str:
        return self.render()

    @cached_property
    def _compiled(self):
        fns = []
        for attr, expr in zip(self.output_schema.attributes, self.bindings):
            fn = compile_expr(expr, self.input_schema)
            if attr.type == "float64":
                fns.append(lambda v, fn=fn: float(fn(v)))
            else:
                fns.append(fn)
        return fns

    def apply_values(self, values: tuple) -> tuple:
        return tuple(fn(values) for fn in self._compiled)

    @classmethod
    def identity(cls, schema: Schema, output: Schema | None = None) -> Transform:
        return cls(schema, output or schema, tuple(Attr(n) for n in schema.names))


def parse_transform(text: str, input_schema: Schema, output_schema: Schema) -> Transform:
    p = _Parser(text)
    found: dict[str, Expr] = {}
    while True:
        t = p.tok
        if t.kind != "ident":
            raise ParseError(f"expected output attribute at {t.pos}")
        p.take()
        p.expect(":=")
        if t.text in found:
            raise TypeCheckError(f"output attribute {t.text} bound twice")
        found[t.text] = p.expr()
        if p.accept(",", ";") is None:
            break
    p.done()
    for name in found:
        output_schema.index(name)
    for expr in found.values():
        for name in attrs_of(expr):
            input_schema.index(name)
    missing = [n for n in output_schema.names if n not in found]
    if missing:
        raise TypeCheckError(f"no binding for output attribute(s) {', '.join(missing)}")
    return Transform(input_schema, output_schema, tuple(found[n] for n in output_schema.names))


def apply_transform(t: Transform, event: Event) -> Event:
    """One output event per input; ``seq`` is dropped, ``origin`` kept."""
    return Event(t.output_schema, t.apply_values(event.values), None, event.origin)
