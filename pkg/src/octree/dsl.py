"""Rule expression language: parsing, type checking, rendering and evaluation.

Grammar (EBNF)::

    rule       = [ name "=" ] expr
    expr       = "if" expr "then" expr "else" expr | or_expr
    or_expr    = and_expr { "or" and_expr }
    and_expr   = not_expr { "and" not_expr }
    not_expr   = "not" not_expr | comparison
    comparison = sum [ ("<" | "<=" | ">" | ">=" | "==" | "!=") sum ]
    sum        = term { ("+" | "-") term }
    term       = unary { ("*" | "/") unary }
    unary      = ("-" | "+") unary | power
    power      = atom [ "**" unary ]
    atom       = number | string | column | call | "(" expr ")"
    call       = [ "np." ] func "(" expr [ "," expr ] ")"
    column     = identifier | "`" any text "`"

Functions: abs sin cos tan log exp sqrt (one argument), min max (two).
``np.minimum``/``np.maximum``/``np.absolute``/``np.power`` are accepted
as aliases. Comparisons and logical operators produce 1.0/0.0.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Literal, Sequence, Union

import numpy as np

from .data import TRUE_VALUES, ColumnMeta, Dataset

UNARY_FUNCS = ("abs", "sin", "cos", "tan", "log", "exp", "sqrt")
BINARY_FUNCS = ("min", "max")
ARITH_OPS = ("+", "-", "*", "/", "**")
COMPARE_OPS = ("<", "<=", ">", ">=", "==", "!=")
LOGIC_OPS = ("and", "or")
KEYWORDS = frozenset({"if", "then", "else", "and", "or", "not"})
ALIASES = {
    "minimum": "min",
    "maximum": "max",
    "absolute": "abs",
    "fabs": "abs",
}


class RuleError(ValueError):
    """Base class for rule language failures."""


class RuleSyntaxError(RuleError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class RuleTypeError(RuleError):
    pass


class UnknownColumnError(RuleTypeError):
    pass


class ExtractionError(RuleError):
    """No parseable rule could be found in generator output."""


@dataclass(frozen=True)
class Col:
    name: str


@dataclass(frozen=True)
class Num:
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value < 0:
            raise RuleError(f"numeric literal must be finite and non-negative: {self.value}")


@dataclass(frozen=True)
class Str:
    value: str


@dataclass(frozen=True)
class Unary:
    op: str  # "neg", "not", or a name in UNARY_FUNCS
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # ARITH_OPS, COMPARE_OPS, LOGIC_OPS or BINARY_FUNCS
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class IfElse:
    cond: "Expr"
    then: "Expr"
    orelse: "Expr"


Expr = Union[Col, Num, Str, Unary, Binary, IfElse]
Origin = Union[Literal["init", "manual"], str]


@dataclass(frozen=True)
class Rule:
    new_column: str
    expr: Expr
    source_text: str = ""
    origin: Origin = "manual"

    def __post_init__(self):
        if not self.new_column:
            raise RuleError("rule needs a non-empty column name")

    @property
    def text(self) -> str:
        return f"{render_name(self.new_column)} = {render(self.expr)}"

    def columns(self) -> set[str]:
        return referenced_columns(self.expr)


# --- tokenizer --------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<str>"(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*')
  | (?P<qname>`[^`]+`)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*(?:\.[A-Za-z_][A-Za-z_0-9]*)*)
  | (?P<op>\*\*|<=|>=|==|!=|&&|\|\||[-+*/<>(),=!&|])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # num, str, name, qname, op, end
    text: str
    pos: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise RuleSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(Token("end", "", len(text)))
    return tokens


def _unquote(s: str) -> str:
    body = s[1:-1]
    return re.sub(r"\\(.)", r"\1", body)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def at(self, *texts: str) -> bool:
        t = self.tok
        return t.kind in ("op", "name") and t.text in texts

    def expect(self, text: str) -> Token:
        if not self.at(text):
            raise RuleSyntaxError(f"expected {text!r}, found {self.tok.text or 'end of input'!r}", self.tok.pos)
        return self.advance()

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            raise RuleSyntaxError(f"unexpected {self.tok.text!r}", self.tok.pos)
        return e

    def expr(self) -> Expr:
        if self.at("if"):
            self.advance()
            cond = self.expr()
            self.expect("then")
            then = self.expr()
            self.expect("else")
            return IfElse(cond, then, self.expr())
        return self.or_expr()

    def or_expr(self) -> Expr:
        left = self.and_expr()
        while self.at("or", "||", "|"):
            self.advance()
            left = Binary("or", left, self.and_expr())
        return left

    def and_expr(self) -> Expr:
        left = self.not_expr()
        while self.at("and", "&&", "&"):
            self.advance()
            left = Binary("and", left, self.not_expr())
        return left

    def not_expr(self) -> Expr:
        if self.at("not", "!"):
            self.advance()
            return Unary("not", self.not_expr())
        return self.comparison()

    def comparison(self) -> Expr:
        left = self.sum()
        if self.tok.kind == "op" and self.tok.text in COMPARE_OPS:
            op = self.advance().text
            right = self.sum()
            if self.tok.kind == "op" and self.tok.text in COMPARE_OPS:
                raise RuleSyntaxError("chained comparisons are not supported", self.tok.pos)
            return Binary(op, left, right)
        return left

    def sum(self) -> Expr:
        left = self.term()
        while self.tok.kind == "op" and self.tok.text in ("+", "-"):
            op = self.advance().text
            left = Binary(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.tok.kind == "op" and self.tok.text in ("*", "/"):
            op = self.advance().text
            left = Binary(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.tok.kind == "op" and self.tok.text == "-":
            self.advance()
            return Unary("neg", self.unary())
        if self.tok.kind == "op" and self.tok.text == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "**":
            self.advance()
            return Binary("**", base, self.unary())
        return base

    def atom(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.advance()
            value = float(t.text)
            if not math.isfinite(value):
                raise RuleSyntaxError(f"numeric literal out of range {t.text!r}", t.pos)
            return Num(value)
        if t.kind == "str":
            self.advance()
            return Str(_unquote(t.text))
        if t.kind == "qname":
            self.advance()
            return Col(t.text[1:-1])
        if t.kind == "op" and t.text == "(":
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        if t.kind == "name":
            if t.text in KEYWORDS:
                raise RuleSyntaxError(f"unexpected keyword {t.text!r}", t.pos)
            self.advance()
            if self.at("("):
                return self.call(t)
            if "." in t.text:
                raise RuleSyntaxError(f"unknown name {t.text!r}", t.pos)
            return Col(t.text)
        raise RuleSyntaxError(f"unexpected {t.text or 'end of input'!r}", t.pos)

    def call(self, name_tok: Token) -> Expr:
        name = name_tok.text
        for prefix in ("np.", "numpy.", "math."):
            if name.startswith(prefix):
                name = name[len(prefix):]
                break
        name = ALIASES.get(name, name)
        self.expect("(")
        args = [self.expr()]
        while self.at(","):
            self.advance()
            args.append(self.expr())
        self.expect(")")
        if name in UNARY_FUNCS:
            if len(args) != 1:
                raise RuleSyntaxError(f"{name}() takes one argument", name_tok.pos)
            return Unary(name, args[0])
        if name in BINARY_FUNCS:
            if len(args) != 2:
                raise RuleSyntaxError(f"{name}() takes two arguments", name_tok.pos)
            return Binary(name, args[0], args[1])
        if name == "power":
            if len(args) != 2:
                raise RuleSyntaxError("power() takes two arguments", name_tok.pos)
            return Binary("**", args[0], args[1])
        raise RuleSyntaxError(f"unknown function {name_tok.text!r}", name_tok.pos)


_ASSIGN_RE = re.compile(r"^\s*(`[^`]+`|[A-Za-z_][\w .'/()-]*?)\s*=(?!=)")


def split_assignment(text: str) -> tuple[str | None, str]:
    """Split ``name = expr`` into (name, expr); name is None if absent."""
    m = _ASSIGN_RE.match(text)
    if m is None:
        return None, text
    name = m.group(1).strip()
    if name.startswith("`"):
        name = name[1:-1]
    return name, text[m.end():].strip()


def parse_expr(text: str) -> Expr:
    """Parse an expression without type checking."""
    return _Parser(text).parse()


def parse(text: str, schema: Sequence[ColumnMeta] | None = None) -> Expr:
    """Parse rule text, dropping an optional leading ``name =``.

    When a schema is given the expression is also type checked against it.
    """
    _, body = split_assignment(text)
    expr = parse_expr(body)
    if schema is not None:
        typecheck(expr, schema)
    return expr


# --- typing -----------------------------------------------------------------

_NUM, _CAT, _STR = "numeric", "categorical", "string"


def typecheck(expr: Expr, schema: Sequence[ColumnMeta]) -> None:
    """Raise RuleTypeError unless ``expr`` is a well-typed numeric expression."""
    kinds = {c.name: c.kind for c in schema}
    t = _type_of(expr, kinds)
    if t != _NUM:
        raise RuleTypeError(f"rule must produce a number, got a bare {t} value")


def _type_of(e: Expr, kinds: dict[str, str]) -> str:
    if isinstance(e, Num):
        return _NUM
    if isinstance(e, Str):
        return _STR
    if isinstance(e, Col):
        if e.name not in kinds:
            raise UnknownColumnError(f"unknown column {e.name!r}")
        return _CAT if kinds[e.name] == "categorical" else _NUM
    if isinstance(e, Unary):
        _require_num(e.operand, kinds, e.op)
        return _NUM
    if isinstance(e, IfElse):
        for part in (e.cond, e.then, e.orelse):
            _require_num(part, kinds, "if")
        return _NUM
    if isinstance(e, Binary):
        if e.op in ("==", "!="):
            lt, rt = _type_of(e.left, kinds), _type_of(e.right, kinds)
            if lt == rt == _NUM:
                return _NUM
            if {lt, rt} == {_CAT, _STR}:
                return _NUM
            raise RuleTypeError(f"cannot compare {lt} with {rt} using {e.op}")
        _require_num(e.left, kinds, e.op)
        _require_num(e.right, kinds, e.op)
        return _NUM
    raise RuleTypeError(f"not an expression node: {e!r}")


def _require_num(e: Expr, kinds, op: str) -> None:
    t = _type_of(e, kinds)
    if t != _NUM:
        raise RuleTypeError(f"operator {op!r} needs a numeric operand, got {t}")


def referenced_columns(e: Expr) -> set[str]:
    if isinstance(e, Col):
        return {e.name}
    if isinstance(e, (Num, Str)):
        return set()
    if isinstance(e, Unary):
        return referenced_columns(e.operand)
    if isinstance(e, Binary):
        return referenced_columns(e.left) | referenced_columns(e.right)
    return referenced_columns(e.cond) | referenced_columns(e.then) | referenced_columns(e.orelse)


# --- rendering --------------------------------------------------------------

_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z_0-9]*$")


def render_name(name: str) -> str:
    if _IDENT_RE.match(name) and name not in KEYWORDS:
        return name
    return f"`{name}`"


def _render_str(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def render(e: Expr) -> str:
    """Canonical, fully parenthesized text; ``parse(render(e)) == e``."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Str):
        return _render_str(e.value)
    if isinstance(e, Col):
        if e.name in UNARY_FUNCS or e.name in BINARY_FUNCS:
            return f"`{e.name}`"
        return render_name(e.name)
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"(-{render(e.operand)})"
        if e.op == "not":
            return f"(not {render(e.operand)})"
        return f"{e.op}({render(e.operand)})"
    if isinstance(e, Binary):
        if e.op in BINARY_FUNCS:
            return f"{e.op}({render(e.left)}, {render(e.right)})"
        return f"({render(e.left)} {e.op} {render(e.right)})"
    if isinstance(e, IfElse):
        return f"(if {render(e.cond)} then {render(e.then)} else {render(e.orelse)})"
    raise TypeError(f"not an expression node: {e!r}")


# --- evaluation -------------------------------------------------------------


def _column_values(d: Dataset, name: str) -> np.ndarray:
    values = d.columns[name]
    if values.dtype != object:
        return values
    if d.meta(name).kind == "boolean":
        return np.asarray([str(v).lower() in TRUE_VALUES for v in values], dtype=float)
    return values


_UNARY_NP = {
    "abs": np.abs,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "log": np.log,
    "exp": np.exp,
    "sqrt": np.sqrt,
}


def _eval(e: Expr, d: Dataset, n: int) -> np.ndarray:
    if isinstance(e, Num):
        return np.full(n, e.value)
    if isinstance(e, Col):
        return _column_values(d, e.name)
    if isinstance(e, Str):
        return np.full(n, e.value, dtype=object)
    if isinstance(e, Unary):
        x = _eval(e.operand, d, n)
        if e.op == "neg":
            return -x
        if e.op == "not":
            return (x == 0).astype(float)
        return _UNARY_NP[e.op](x)
    if isinstance(e, IfElse):
        cond = _eval(e.cond, d, n)
        return np.where(cond != 0, _eval(e.then, d, n), _eval(e.orelse, d, n))
    a = _eval(e.left, d, n)
    b = _eval(e.right, d, n)
    op = e.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    if op == "**":
        return np.power(a, b)
    if op == "min":
        return np.minimum(a, b)
    if op == "max":
        return np.maximum(a, b)
    if op == "and":
        return ((a != 0) & (b != 0)).astype(float)
    if op == "or":
        return ((a != 0) | (b != 0)).astype(float)
    if a.dtype == object or b.dtype == object:
        eq = np.asarray([str(x) == str(y) for x, y in zip(a, b)], dtype=bool)
        return (eq if op == "==" else ~eq).astype(float)
    cmp = {
        "<": np.less,
        "<=": np.less_equal,
        ">": np.greater,
        ">=": np.greater_equal,
        "==": np.equal,
        "!=": np.not_equal,
    }[op]
    return cmp(a, b).astype(float)


@dataclass(frozen=True)
class Evaluation:
    values: np.ndarray
    non_finite: int

    @property
    def non_finite_fraction(self) -> float:
        return self.non_finite / len(self.values) if len(self.values) else 0.0


def evaluate(e: Expr, d: Dataset) -> Evaluation:
    """Row-wise evaluation; non-finite results become 0.0 and are counted."""
    with np.errstate(all="ignore"):
        raw = np.asarray(_eval(e, d, d.n_rows), dtype=float)
    bad = ~np.isfinite(raw)
    values = np.where(bad, 0.0, raw)
    return Evaluation(values, int(bad.sum()))


# --- generator output extraction --------------------------------------------

_FENCE_RE = re.compile(r"```[A-Za-z0-9_+-]*\n?(.*?)```", re.DOTALL)


def _clean_line(line: str) -> str:
    line = line.strip()
    line = re.sub(r"^(?:[-*>]\s+|\d+[.)]\s+)", "", line)
    if line.startswith("`") and line.endswith("`") and line.count("`") == 2:
        line = line[1:-1]
    return line.strip().rstrip(";").strip()


def _try_parse(text: str, schema) -> Expr | None:
    try:
        return parse(text, schema)
    except RuleError:
        return None


def _from_lines(lines: Sequence[str], schema) -> tuple[Expr, str] | None:
    for line in reversed(lines):
        line = _clean_line(line)
        if "=" not in line:
            continue
        name, body = split_assignment(line)
        if name is None:
            continue
        e = _try_parse(body, schema)
        if e is not None:
            return e, line
    return None


def extract_rule(output: str, schema: Sequence[ColumnMeta], expected_name: str, origin: Origin = "manual") -> Rule:
    """Find the first parseable rule in free-form generator output.

    Tries fenced code blocks, then the last assignment line whose right side
    parses, then the whole text as a bare expression. The resulting rule is
    bound to ``expected_name`` whatever name the generator wrote.
    """
    for block in _FENCE_RE.findall(output):
        lines = [ln for ln in block.splitlines() if ln.strip()]
        found = _from_lines(lines, schema)
        if found is None and lines:
            e = _try_parse(" ".join(_clean_line(ln) for ln in lines), schema)
            if e is not None:
                found = (e, block.strip())
        if found is not None:
            return Rule(expected_name, found[0], output, origin)
    found = _from_lines(output.splitlines(), schema)
    if found is not None:
        return Rule(expected_name, found[0], output, origin)
    e = _try_parse(_clean_line(output), schema)
    if e is not None:
        return Rule(expected_name, e, output, origin)
    raise ExtractionError(f"no parseable rule in generator output: {output[:80]!r}")


# --- random expressions -----------------------------------------------------

_RANDOM_BINARY = ("+", "-", "*", "/", "**", "min", "max")


def random_expr(rng: np.random.Generator, schema: Sequence[ColumnMeta], max_depth: int = 3) -> Expr:
    """Sample a well-typed numeric expression over ``schema``."""
    numeric = [c.name for c in schema if c.kind != "categorical"]
    categorical = [c for c in schema if c.kind == "categorical" and c.domain]
    if not numeric and not categorical:
        raise RuleError("schema has no usable columns")

    def leaf() -> Expr:
        r = rng.random()
        if categorical and (r < 0.15 or not numeric):
            meta = categorical[rng.integers(len(categorical))]
            value = meta.domain[rng.integers(len(meta.domain))]
            op = "==" if rng.random() < 0.7 else "!="
            return Binary(op, Col(meta.name), Str(value))
        if r < 0.3 or not numeric:
            return Num(float(round(rng.uniform(0, 3), 2)))
        return Col(numeric[rng.integers(len(numeric))])

    def node(depth: int) -> Expr:
        if depth <= 0 or rng.random() < 0.25:
            return leaf()
        r = rng.random()
        if r < 0.55:
            op = _RANDOM_BINARY[rng.integers(len(_RANDOM_BINARY))]
            if op == "**":
                return Binary(op, node(depth - 1), Num(float(rng.integers(1, 4))))
            return Binary(op, node(depth - 1), node(depth - 1))
        if r < 0.75:
            ops = ("neg",) + UNARY_FUNCS
            return Unary(ops[rng.integers(len(ops))], node(depth - 1))
        if r < 0.85:
            op = COMPARE_OPS[rng.integers(len(COMPARE_OPS))]
            return Binary(op, node(depth - 1), node(depth - 1))
        if r < 0.92:
            op = ("and", "or")[rng.integers(2)]
            return Binary(op, node(depth - 1), node(depth - 1))
        if r < 0.96:
            return Unary("not", node(depth - 1))
        return IfElse(node(depth - 1), node(depth - 1), node(depth - 1))

    return node(max_depth)
