"""Recursive-descent parser for the small surface-expression language.

Grammar (loosest binding first)::

    expr   := term  (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' exponent)?          exponent must fold to a constant
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

so ``^`` binds tighter than unary minus, which binds tighter than ``*``/``/``,
which bind tighter than ``+``/``-``; ``+ - * /`` are left associative.
Recognized names are the variables (``u``, ``v`` by default, ``t`` for plane
curves), the constants ``pi`` and ``e``, and the functions sin, cos, exp,
log, sinh, cosh, sqrt.  Parse errors carry the byte offset of the offending
token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .jets import Jet2

__all__ = [
    "ParseError",
    "ExprAst",
    "Const",
    "Var",
    "Call",
    "Neg",
    "BinOp",
    "parse_expression",
    "eval_ast",
    "format_ast",
    "FUNCTIONS",
    "CONSTANTS",
]

FUNCTIONS = ("sin", "cos", "exp", "log", "sinh", "cosh", "sqrt")
CONSTANTS = {"pi": math.pi, "e": math.e}


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    index: int
    name: str


@dataclass(frozen=True)
class Call:
    fn: str
    arg: "ExprAst"


@dataclass(frozen=True)
class Neg:
    arg: "ExprAst"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "ExprAst"
    right: "ExprAst"


ExprAst = Const | Var | Call | Neg | BinOp


@dataclass(frozen=True)
class _Token:
    kind: str  # num | name | op | lparen | rparen | end
    text: str
    offset: int


def _tokenize(src: str) -> list[_Token]:
    tokens = []
    i, n = 0, len(src)
    while i < n:
        ch = src[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            while j < n and (src[j].isdigit() or src[j] == "."):
                j += 1
            if j < n and src[j] in "eE" and j + 1 < n and (
                src[j + 1].isdigit() or (src[j + 1] in "+-" and j + 2 < n and src[j + 2].isdigit())
            ):
                j += 2
                while j < n and src[j].isdigit():
                    j += 1
            text = src[i:j]
            try:
                float(text)
            except ValueError:
                raise ParseError(f"bad number literal {text!r}", i) from None
            tokens.append(_Token("num", text, i))
            i = j
        elif ch.isalpha() or ch == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            tokens.append(_Token("name", src[i:j], i))
            i = j
        elif ch in "+-*/^":
            tokens.append(_Token("op", ch, i))
            i += 1
        elif ch == "(":
            tokens.append(_Token("lparen", ch, i))
            i += 1
        elif ch == ")":
            tokens.append(_Token("rparen", ch, i))
            i += 1
        else:
            raise ParseError(f"unexpected character {ch!r}", i)
    tokens.append(_Token("end", "", n))
    return tokens


class _Parser:
    def __init__(self, src: str, variables: tuple[str, ...]):
        self.tokens = _tokenize(src)
        self.pos = 0
        self.variables = variables

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str, text: str | None = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text or kind
            raise ParseError(f"expected {want!r}, found {tok.text or 'end of input'!r}", tok.offset)
        return self.advance()

    def parse(self) -> ExprAst:
        if self.peek().kind == "end":
            raise ParseError("empty expression", 0)
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ParseError(f"unexpected trailing input {tok.text!r}", tok.offset)
        return node

    def expr(self) -> ExprAst:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> ExprAst:
        node = self.unary()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> ExprAst:
        tok = self.peek()
        if tok.kind == "op" and tok.text == "-":
            self.advance()
            return Neg(self.unary())
        if tok.kind == "op" and tok.text == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> ExprAst:
        node = self.atom()
        tok = self.peek()
        if tok.kind == "op" and tok.text == "^":
            self.advance()
            exp_tok = self.peek()
            exponent = self.unary()
            value = _fold_constant(exponent)
            if value is None:
                raise ParseError("exponent must be a constant", exp_tok.offset)
            return BinOp("^", node, Const(value))
        return node

    def atom(self) -> ExprAst:
        tok = self.advance()
        if tok.kind == "num":
            return Const(float(tok.text))
        if tok.kind == "lparen":
            node = self.expr()
            self.expect("rparen")
            return node
        if tok.kind == "name":
            name = tok.text
            if self.peek().kind == "lparen":
                if name not in FUNCTIONS:
                    raise ParseError(f"unknown function {name!r}", tok.offset)
                self.advance()
                arg = self.expr()
                self.expect("rparen")
                return Call(name, arg)
            if name in self.variables:
                return Var(self.variables.index(name), name)
            if name in CONSTANTS:
                return Const(CONSTANTS[name])
            raise ParseError(f"unknown identifier {name!r}", tok.offset)
        raise ParseError(f"expected a value, found {tok.text or 'end of input'!r}", tok.offset)


def _fold_constant(node: ExprAst) -> float | None:
    """Value of a variable-free subtree, or None if it mentions a variable."""
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        return None
    if isinstance(node, Neg):
        v = _fold_constant(node.arg)
        return None if v is None else -v
    if isinstance(node, Call):
        v = _fold_constant(node.arg)
        return None if v is None else float(getattr(math, node.fn)(v))
    if isinstance(node, BinOp):
        a, b = _fold_constant(node.left), _fold_constant(node.right)
        if a is None or b is None:
            return None
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            return a / b
        return a**b
    raise TypeError(f"not an expression node: {node!r}")


def parse_expression(src: str, variables: tuple[str, ...] = ("u", "v")) -> ExprAst:
    return _Parser(src, variables).parse()


def eval_ast(node: ExprAst, args: tuple):
    """Evaluate the tree over jets (or anything with jet-like operators)."""
    if isinstance(node, Const):
        ref = args[0]
        if isinstance(ref, Jet2):
            return Jet2.constant(node.value, ref.order, ref.value.shape)
        return node.value
    if isinstance(node, Var):
        return args[node.index]
    if isinstance(node, Neg):
        return -eval_ast(node.arg, args)
    if isinstance(node, Call):
        arg = eval_ast(node.arg, args)
        if isinstance(arg, Jet2):
            return getattr(arg, node.fn)()
        return getattr(math, node.fn)(arg)
    if isinstance(node, BinOp):
        left = eval_ast(node.left, args)
        if node.op == "^":
            assert isinstance(node.right, Const)
            if isinstance(left, Jet2):
                return left.powr(node.right.value)
            return left**node.right.value
        right = eval_ast(node.right, args)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        return left / right
    raise TypeError(f"not an expression node: {node!r}")


_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def format_ast(node: ExprAst) -> str:
    """Render a tree back to source; reparsing gives an identical tree."""
    text, _ = _format(node)
    return text


def _format(node: ExprAst) -> tuple[str, int]:
    if isinstance(node, Const):
        if node.value >= 0:
            return repr(node.value), 5
        return f"-{-node.value!r}", _PRECEDENCE["neg"]
    if isinstance(node, Var):
        return node.name, 5
    if isinstance(node, Call):
        return f"{node.fn}({format_ast(node.arg)})", 5
    if isinstance(node, Neg):
        inner, prec = _format(node.arg)
        if prec < _PRECEDENCE["neg"]:
            inner = f"({inner})"
        return f"-{inner}", _PRECEDENCE["neg"]
    if isinstance(node, BinOp):
        my = _PRECEDENCE[node.op]
        left, lp = _format(node.left)
        right, rp = _format(node.right)
        # ^ is non associative (single optional exponent), so a power base
        # that is itself a power needs parens even at equal precedence
        if lp < my or (node.op == "^" and lp <= my):
            left = f"({left})"
        # right operand needs parens at equal precedence: ops are left
        # associative, and ^ takes a bare constant exponent anyway
        if rp <= my and node.op != "^":
            right = f"({right})"
        if node.op == "^" and rp < 5:
            right = f"({right})"
        return f"{left} {node.op} {right}", my
    raise TypeError(f"not an expression node: {node!r}")
