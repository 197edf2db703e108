"""Parser and evaluator for the coefficient expression language.

Coefficients are written as plain infix formulas over a fixed vocabulary of
variables:

* ``t``            current time,
* ``x1..xd``       state coordinates,
* ``v1..vn``       control coordinates,
* ``w1..w{m0}``    live value of the observed Wiener block,
* ``k1..k{m0*N}``  knot values of the observed Wiener block (knot ``i``,
                   coordinate ``c`` is ``k{(i-1)*m0 + c}``).

Supported syntax: ``+ - * / ^`` (power, right associative), unary minus,
parentheses, numeric literals, and calls ``exp, log, sqrt, sin, cos, tanh,
abs, min, max`` (the last two take two arguments).

Evaluation is vectorised: variables may be bound to NumPy arrays with
mutually broadcastable shapes.  Any finite input either yields a finite
result or raises :class:`ExprDomainError` pointing at the offending
operation (division by zero, fractional power of a negative base, ``log`` or
``sqrt`` outside their domain, overflow).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Union

import numpy as np

__all__ = [
    "Expr",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "ExprSyntaxError",
    "ExprDomainError",
    "parse",
    "evaluate",
    "unparse",
    "free_vars",
    "substitute",
]


class ExprSyntaxError(ValueError):
    """Malformed source text; ``pos`` is the character offset."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at offset {pos})")
        self.pos = pos


class ExprDomainError(ArithmeticError):
    """Evaluation left the domain of an operation.

    ``pos`` is the character offset of the operation in the original source
    when the expression was built by :func:`parse` (substituted subtrees keep
    their own offsets).
    """

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (operation at offset {pos})")
        self.pos = pos


@dataclass(frozen=True)
class Num:
    value: float
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Var:
    name: str
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Neg:
    operand: "Expr"
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple["Expr", ...]
    pos: int = field(default=0, compare=False)


Expr = Union[Num, Var, Neg, BinOp, Call]

_FUNCTIONS = {"exp": 1, "log": 1, "sqrt": 1, "sin": 1, "cos": 1, "tanh": 1, "abs": 1, "min": 2, "max": 2}


# ---------------------------------------------------------------------------
# tokenizer / parser


@dataclass
class _Token:
    kind: str  # "num", "name", "op", "end"
    text: str
    pos: int


def _tokenize(src: str) -> Iterator[_Token]:
    i, n = 0, len(src)
    while i < n:
        ch = src[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            seen_exp = False
            while j < n and (src[j].isdigit() or src[j] == "." or src[j] in "eE" or (seen_exp and src[j] in "+-" and src[j - 1] in "eE")):
                if src[j] in "eE":
                    seen_exp = True
                j += 1
            yield _Token("num", src[i:j], i)
            i = j
        elif ch.isalpha() or ch == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            yield _Token("name", src[i:j], i)
            i = j
        elif ch in "+-*/^(),":
            yield _Token("op", ch, i)
            i += 1
        else:
            raise ExprSyntaxError(f"unexpected character {ch!r}", i)
    yield _Token("end", "", n)


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.tokens = list(_tokenize(src))
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.advance()
        if tok.text != text:
            raise ExprSyntaxError(f"expected {text!r}, found {tok.text or 'end of input'!r}", tok.pos)
        return tok

    def parse_expr(self) -> Expr:
        node = self.parse_term()
        while self.peek().text in ("+", "-"):
            tok = self.advance()
            node = BinOp(tok.text, node, self.parse_term(), pos=tok.pos)
        return node

    def parse_term(self) -> Expr:
        node = self.parse_unary()
        while self.peek().text in ("*", "/"):
            tok = self.advance()
            node = BinOp(tok.text, node, self.parse_unary(), pos=tok.pos)
        return node

    def parse_unary(self) -> Expr:
        if self.peek().text == "-":
            tok = self.advance()
            return Neg(self.parse_unary(), pos=tok.pos)
        return self.parse_power()

    def parse_power(self) -> Expr:
        base = self.parse_atom()
        if self.peek().text == "^":
            tok = self.advance()
            # right associative; the exponent may carry its own sign
            return BinOp("^", base, self.parse_unary(), pos=tok.pos)
        return base

    def parse_atom(self) -> Expr:
        tok = self.advance()
        if tok.kind == "num":
            try:
                value = float(tok.text)
            except ValueError:
                raise ExprSyntaxError(f"bad numeric literal {tok.text!r}", tok.pos) from None
            return Num(value, pos=tok.pos)
        if tok.kind == "name":
            if self.peek().text == "(":
                if tok.text not in _FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {tok.text!r}", tok.pos)
                self.expect("(")
                args = [self.parse_expr()]
                while self.peek().text == ",":
                    self.advance()
                    args.append(self.parse_expr())
                self.expect(")")
                if len(args) != _FUNCTIONS[tok.text]:
                    raise ExprSyntaxError(
                        f"{tok.text} takes {_FUNCTIONS[tok.text]} argument(s), got {len(args)}", tok.pos
                    )
                return Call(tok.text, tuple(args), pos=tok.pos)
            return Var(tok.text, pos=tok.pos)
        if tok.text == "(":
            node = self.parse_expr()
            self.expect(")")
            return node
        raise ExprSyntaxError(f"unexpected token {tok.text or 'end of input'!r}", tok.pos)


def parse(src: str, allowed_vars: set[str] | None = None) -> Expr:
    """Parse ``src`` into an expression tree.

    Parameters
    ----------
    src : str
        Formula text.
    allowed_vars : set of str, optional
        When given, any variable outside the set raises
        :class:`ExprSyntaxError` (used to reject names that do not exist for
        the problem dimensions at hand).
    """
    parser = _Parser(src)
    node = parser.parse_expr()
    tok = parser.peek()
    if tok.kind != "end":
        raise ExprSyntaxError(f"trailing input {tok.text!r}", tok.pos)
    if allowed_vars is not None:
        for name, pos in sorted(_iter_vars(node)):
            if name not in allowed_vars:
                raise ExprSyntaxError(f"unknown variable {name!r}", pos)
    return node


def _iter_vars(node: Expr) -> Iterator[tuple[str, int]]:
    if isinstance(node, Var):
        yield node.name, node.pos
    elif isinstance(node, Neg):
        yield from _iter_vars(node.operand)
    elif isinstance(node, BinOp):
        yield from _iter_vars(node.left)
        yield from _iter_vars(node.right)
    elif isinstance(node, Call):
        for a in node.args:
            yield from _iter_vars(a)


def free_vars(node: Expr) -> frozenset[str]:
    return frozenset(name for name, _ in _iter_vars(node))


# ---------------------------------------------------------------------------
# evaluation


def _check(cond: np.ndarray | bool, message: str, pos: int) -> None:
    if np.any(cond):
        raise ExprDomainError(message, pos)


def _eval(node: Expr, env: Mapping[str, object]):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise ExprDomainError(f"unbound variable {node.name!r}", node.pos) from None
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, BinOp):
        left = _eval(node.left, env)
        right = _eval(node.right, env)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        if node.op == "/":
            _check(np.equal(right, 0.0), "division by zero", node.pos)
            return left / right
        if node.op == "^":
            fractional = np.not_equal(right, np.floor(right))
            _check(np.logical_and(np.less(left, 0.0), fractional), "fractional power of a negative base", node.pos)
            return np.power(left, right)
        raise AssertionError(node.op)
    if isinstance(node, Call):
        args = [_eval(a, env) for a in node.args]
        if node.fn == "exp":
            return np.exp(args[0])
        if node.fn == "log":
            _check(np.less_equal(args[0], 0.0), "log of a non-positive value", node.pos)
            return np.log(args[0])
        if node.fn == "sqrt":
            _check(np.less(args[0], 0.0), "sqrt of a negative value", node.pos)
            return np.sqrt(args[0])
        if node.fn == "sin":
            return np.sin(args[0])
        if node.fn == "cos":
            return np.cos(args[0])
        if node.fn == "tanh":
            return np.tanh(args[0])
        if node.fn == "abs":
            return np.abs(args[0])
        if node.fn == "min":
            return np.minimum(args[0], args[1])
        if node.fn == "max":
            return np.maximum(args[0], args[1])
        raise AssertionError(node.fn)
    raise AssertionError(type(node))


def _first_nonfinite(node: Expr, env: Mapping[str, object]) -> int:
    """Offset of the innermost operation whose result is non-finite."""
    if isinstance(node, (Neg, BinOp, Call)):
        children = (
            (node.operand,) if isinstance(node, Neg) else (node.left, node.right) if isinstance(node, BinOp) else node.args
        )
        for child in children:
            pos = _first_nonfinite(child, env)
            if pos >= 0:
                return pos
    value = _eval(node, env)
    if not np.all(np.isfinite(value)):
        return node.pos
    return -1


def evaluate(node: Expr, env: Mapping[str, object], checked: bool = True):
    """Evaluate ``node`` with variables bound by ``env``.

    Scalars and broadcastable NumPy arrays are both fine.  With
    ``checked=True`` (the default) a non-finite result is diagnosed and
    raised as :class:`ExprDomainError`; hot loops that validate results
    themselves can pass ``checked=False``.
    """
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value = _eval(node, env)
        if checked and not np.all(np.isfinite(value)):
            pos = _first_nonfinite(node, env)
            raise ExprDomainError("non-finite result (overflow?)", max(pos, 0))
    return value


# ---------------------------------------------------------------------------
# unparse / substitute

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 2.5, "^": 3, "atom": 4}


def _prec(node: Expr) -> float:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _PREC["neg"]
    return _PREC["atom"]


def unparse(node: Expr) -> str:
    """Render a tree back to source.  ``parse(unparse(e))`` equals ``e``."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        inner = unparse(node.operand)
        if _prec(node.operand) < _PREC["neg"]:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Call):
        return f"{node.fn}({', '.join(unparse(a) for a in node.args)})"
    if isinstance(node, BinOp):
        lhs, rhs = unparse(node.left), unparse(node.right)
        p = _PREC[node.op]
        if node.op == "^":
            # right associative: parenthesise an equally tight left child
            if _prec(node.left) <= p:
                lhs = f"({lhs})"
            if _prec(node.right) < p:
                rhs = f"({rhs})"
        else:
            if _prec(node.left) < p:
                lhs = f"({lhs})"
            if _prec(node.right) < p or (_prec(node.right) == p and node.op in ("-", "/")):
                rhs = f"({rhs})"
        return f"{lhs} {node.op} {rhs}" if node.op in ("+", "-") else f"{lhs}{node.op}{rhs}"
    raise AssertionError(type(node))


def substitute(node: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace variables by subtrees (used to freeze live noise at knots)."""
    if isinstance(node, Var):
        return mapping.get(node.name, node)
    if isinstance(node, Num):
        return node
    if isinstance(node, Neg):
        return Neg(substitute(node.operand, mapping), pos=node.pos)
    if isinstance(node, BinOp):
        return BinOp(node.op, substitute(node.left, mapping), substitute(node.right, mapping), pos=node.pos)
    if isinstance(node, Call):
        return Call(node.fn, tuple(substitute(a, mapping) for a in node.args), pos=node.pos)
    raise AssertionError(type(node))


def compile_fn(node: Expr) -> Callable[[Mapping[str, object]], object]:
    """Bind a tree into a reusable ``env -> value`` callable (unchecked)."""

    def fn(env: Mapping[str, object]):
        return evaluate(node, env, checked=False)

    return fn
