"""Expression language: grammar, jet evaluation, pretty-printer round trip."""

from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surf4.expr import (
    BinOp,
    Const,
    ParseError,
    Var,
    eval_ast,
    format_ast,
    parse_expression,
)
from surf4.jets import Jet2


def ev(src, u, v):
    return eval_ast(parse_expression(src), (u, v))


def test_precedence_power_over_unary_minus():
    assert ev("-u^2", 3.0, 0.0) == -9.0


def test_precedence_mul_over_add():
    assert ev("1 + 2*u", 5.0, 0.0) == 11.0


def test_left_associativity():
    assert ev("u - v - 1", 10.0, 3.0) == 6.0
    assert ev("u / v / 2", 12.0, 3.0) == 2.0


def test_constants_and_functions():
    assert abs(ev("sin(pi/2)", 0.0, 0.0) - 1.0) < 1e-15
    assert abs(ev("log(e)", 0.0, 0.0) - 1.0) < 1e-15
    assert abs(ev("sqrt(u^2 + v^2)", 3.0, 4.0) - 5.0) < 1e-15


def test_unary_plus_tolerated():
    assert ev("+u", 2.0, 0.0) == 2.0


def test_curve_variable_name():
    ast = parse_expression("cos(t)", variables=("t",))
    assert abs(eval_ast(ast, (math.pi,)) + 1.0) < 1e-15


def test_constant_exponent_folding():
    ast = parse_expression("u^(1+1)")
    assert isinstance(ast, BinOp) and isinstance(ast.right, Const)
    assert ast.right.value == 2.0


def test_jet_evaluation_matches_float():
    src = "sin(u)*cos(v) + exp(-u^2) - v/3"
    u0, v0 = 0.3, 0.5
    uj = Jet2.variable(u0, 0, 2)
    vj = Jet2.variable(v0, 1, 2)
    got = ev(src, uj, vj)
    want = math.sin(u0) * math.cos(v0) + math.exp(-(u0**2)) - v0 / 3
    assert abs(got.value - want) < 1e-15
    # first derivatives against hand formulas
    assert abs(got.du().value - (math.cos(u0) * math.cos(v0) - 2 * u0 * math.exp(-(u0**2)))) < 1e-14
    assert abs(got.dv().value - (-math.sin(u0) * math.sin(v0) - 1 / 3)) < 1e-14


@pytest.mark.parametrize(
    "src,offset",
    [
        ("u +", 3),
        ("u^v", 2),
        ("foo(u)", 0),
        ("w + 1", 0),
        ("(u", 2),
        ("2 ** u", 3),
        ("u @ v", 2),
        ("", 0),
    ],
)
def test_parse_errors_carry_offsets(src, offset):
    with pytest.raises(ParseError) as err:
        parse_expression(src)
    assert err.value.offset == offset


# random tree generation for the printer round trip
leaf = st.sampled_from(["u", "v", "1.5", "2.0", "pi"])


def trees(depth):
    if depth == 0:
        return leaf
    sub = trees(depth - 1)
    return st.one_of(
        leaf,
        st.tuples(st.sampled_from("+-*/"), sub, sub).map(lambda t: f"({t[1]} {t[0]} {t[2]})"),
        sub.map(lambda s: f"-({s})"),
        st.tuples(st.sampled_from(["sin", "cos", "exp", "sinh", "cosh"]), sub).map(
            lambda t: f"{t[0]}({t[1]})"
        ),
        sub.map(lambda s: f"({s})^2"),
    )


@settings(max_examples=120, deadline=None)
@given(src=trees(3), u=st.floats(-2, 2), v=st.floats(-2, 2))
def test_printer_round_trip(src, u, v):
    """format(parse(x)) is a fixed point and preserves the tree."""
    ast = parse_expression(src)
    printed = format_ast(ast)
    reparsed = parse_expression(printed)
    assert reparsed == ast
    assert format_ast(reparsed) == printed
    try:
        a = eval_ast(ast, (u, v))
        b = eval_ast(reparsed, (u, v))
    except ZeroDivisionError:
        return
    if math.isfinite(a) and math.isfinite(b):
        assert a == b


def test_var_indexing():
    ast = parse_expression("v", variables=("u", "v"))
    assert ast == Var(1, "v")
