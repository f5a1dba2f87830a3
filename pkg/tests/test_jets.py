"""Order-2+ truncated Taylor arithmetic: frozen examples, algebra laws, FD cross-checks."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surf4.jets import (
    FDConfig,
    Jet2,
    JetDivisionError,
    JetDomainError,
    StencilError,
    coeff_index,
    fd_jet,
    jet_elementary,
    jets_where,
    ncoeff,
)

# Expected order-2 jet of (u^2)/u at u=3, v=anything: value 3, du 1, everything else 0.
# Worked by hand from the quotient recurrence; frozen before the module existed.
DIVISION_EXAMPLE = np.array([3.0, 1.0, 0.0, 0.0, 0.0, 0.0])

finite = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False, allow_infinity=False)
nonzero = finite.filter(lambda x: abs(x) > 1e-3)


def jet_at(u, v, order=2):
    return Jet2.variable(u, 0, order), Jet2.variable(v, 1, order)


def random_jet(draw, order=2):
    coeffs = np.array([draw(finite) for _ in range(ncoeff(order))])
    return Jet2(order, coeffs)


# --- frozen scalar examples -------------------------------------------------

def test_layout_triangular():
    assert ncoeff(2) == 6
    assert ncoeff(4) == 15
    assert coeff_index(0, 0) == 0
    assert coeff_index(1, 0) == 1
    assert coeff_index(0, 1) == 2
    assert coeff_index(2, 0) == 3
    assert coeff_index(1, 1) == 4
    assert coeff_index(0, 2) == 5


def test_division_cancels_pole():
    u, _ = jet_at(3.0, 0.0)
    out = (u * u) / u
    np.testing.assert_array_equal(out.coeffs, DIVISION_EXAMPLE)


def test_pythagorean_identity_order4():
    u = Jet2.variable(0.7, 0, 4)
    out = u.sin() * u.sin() + u.cos() * u.cos()
    expect = np.zeros(ncoeff(4))
    expect[0] = 1.0
    assert np.max(np.abs(out.coeffs - expect)) < 1e-14


def test_exp_log_roundtrip():
    u, v = jet_at(0.4, -0.2)
    w = u * u + v * v + Jet2.constant(1.0, 2)
    out = w.log().exp()
    assert np.max(np.abs(out.coeffs - w.coeffs)) < 1e-13


def test_sqrt_squares_back():
    u, v = jet_at(1.5, 2.5)
    w = u * v + Jet2.constant(2.0, 2)
    r = w.sqrt()
    assert np.max(np.abs((r * r).coeffs - w.coeffs)) < 1e-13


def test_powr_matches_exp_log():
    u, _ = jet_at(1.7, 0.0)
    a = u.powr(2.5)
    b = (u.log() * 2.5).exp()
    assert np.max(np.abs(a.coeffs - b.coeffs)) < 1e-12


def test_integer_pow_negative():
    u, _ = jet_at(2.0, 0.0)
    a = u ** (-2)
    b = Jet2.constant(1.0, 2) / (u * u)
    assert np.max(np.abs(a.coeffs - b.coeffs)) < 1e-15


def test_derivative_extraction():
    u, v = jet_at(0.3, 0.8, order=3)
    w = u.sin() * v.cos()
    wu = w.du()
    assert wu.order == 2
    ref = math.cos(0.3) * math.cos(0.8)
    assert abs(wu.value - ref) < 1e-14
    wuv = w.du().dv()
    assert abs(wuv.value - (-math.cos(0.3) * math.sin(0.8))) < 1e-14


def test_poly_evaluation_shift():
    u, v = jet_at(1.0, 2.0)
    w = u * u + u * v * Jet2.constant(3.0, 2)
    # value of the truncated polynomial at an offset
    got = w.poly(0.1, -0.2)
    uu, vv = 1.1, 1.8
    assert abs(got - (uu * uu + 3 * uu * vv)) < 1e-12


def test_batched_lanes_independent():
    us = np.linspace(0.0, 1.0, 7)
    u = Jet2.variable(us, 0, 2)
    w = u.sin()
    for k, uk in enumerate(us):
        assert abs(w.value[k] - math.sin(uk)) < 1e-15
        assert abs(w.coeffs[k, coeff_index(1, 0)] - math.cos(uk)) < 1e-15


def test_jets_where_selects_lanes():
    u = Jet2.variable(np.array([1.0, 2.0]), 0, 2)
    a = u * u
    b = Jet2.constant(np.array([5.0, 6.0]), 2)
    out = jets_where(np.array([True, False]), a, b)
    assert out.value[0] == 1.0 and out.value[1] == 6.0


# --- error cases ------------------------------------------------------------

def test_divide_by_zero_value():
    zero = Jet2.constant(0.0, 2)
    one = Jet2.constant(1.0, 2)
    with pytest.raises(JetDivisionError, match="jet division by zero"):
        _ = one / zero


def test_log_of_nonpositive():
    w = Jet2.constant(-1.0, 2)
    with pytest.raises(JetDomainError, match="jet domain error"):
        w.log()


def test_sqrt_of_negative():
    w = Jet2.constant(-4.0, 2)
    with pytest.raises(JetDomainError, match="jet domain error"):
        w.sqrt()


def test_fd_rejects_high_order():
    with pytest.raises(ValueError):
        fd_jet(lambda u, v: (u,), (0.0, 0.0), order=3)


def test_fd_stencil_pinned_at_corner():
    with pytest.raises(StencilError, match="stencil out of bounds"):
        fd_jet(lambda u, v: (u + v,), (0.0, 0.5), order=2, bounds=(0.0, 0.0, 0.0, 1.0))


# --- FD versus analytic jets ------------------------------------------------

def test_fd_matches_analytic_example():
    def fn(u, v):
        return (math.sin(u) * math.cos(v),)

    (got,) = fd_jet(fn, (0.3, 0.5), order=2)
    u, v = jet_at(0.3, 0.5)
    want = u.sin() * v.cos()
    assert np.max(np.abs(got.coeffs - want.coeffs)) < 1e-7


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_fd_recovers_polynomial_jets(data):
    """Central differences with Richardson reproduce jets of quadratics almost exactly."""
    coef = [data.draw(finite) for _ in range(6)]
    at = (data.draw(finite), data.draw(finite))

    def fn(u, v):
        return (coef[0] + coef[1] * u + coef[2] * v + coef[3] * u * u + coef[4] * u * v + coef[5] * v * v,)

    (got,) = fd_jet(fn, at, order=2)
    u, v = jet_at(*at)
    want = (
        Jet2.constant(coef[0], 2)
        + u * coef[1]
        + v * coef[2]
        + u * u * coef[3]
        + u * v * coef[4]
        + v * v * coef[5]
    )
    # second differences lose eps * |f| / h^2, and |f| grows with the point
    scale = (1.0 + np.max(np.abs(want.coeffs))) * (1.0 + max(map(abs, at))) ** 2
    assert np.max(np.abs(got.coeffs - want.coeffs)) < 1e-6 * scale


# --- algebra laws -----------------------------------------------------------

@settings(max_examples=80, deadline=None)
@given(st.data())
def test_ring_laws(data):
    a = random_jet(data.draw)
    b = random_jet(data.draw)
    c = random_jet(data.draw)
    lhs = (a * b) * c
    rhs = a * (b * c)
    scale = 1.0 + np.max(np.abs(lhs.coeffs))
    assert np.max(np.abs(lhs.coeffs - rhs.coeffs)) < 1e-12 * scale
    lhs = a * (b + c)
    rhs = a * b + a * c
    scale = 1.0 + np.max(np.abs(lhs.coeffs))
    assert np.max(np.abs(lhs.coeffs - rhs.coeffs)) < 1e-12 * scale


@settings(max_examples=80, deadline=None)
@given(st.data())
def test_division_inverts_multiplication(data):
    a = random_jet(data.draw)
    b = random_jet(data.draw)
    b.coeffs[0] = data.draw(nonzero)
    out = (a * b) / b
    scale = 1.0 + np.max(np.abs(a.coeffs))
    assert np.max(np.abs(out.coeffs - a.coeffs)) < 1e-10 * scale


@settings(max_examples=60, deadline=None)
@given(u0=st.floats(min_value=-3.0, max_value=3.0), v0=st.floats(min_value=-3.0, max_value=3.0))
def test_elementary_derivatives(u0, v0):
    """d/du of each elementary function agrees with the hand derivative."""
    u, v = jet_at(u0, v0, order=3)
    w = u * 0.7 + v * 0.3
    pairs = [
        (w.sin(), w.cos() * 0.7),
        (w.cos(), -w.sin() * 0.7),
        (w.exp(), w.exp() * 0.7),
        (w.sinh(), w.cosh() * 0.7),
        (w.cosh(), w.sinh() * 0.7),
    ]
    for fn_val, deriv in pairs:
        got = fn_val.du()
        assert np.max(np.abs(got.coeffs - deriv.truncated(2).coeffs)) < 1e-12


def test_elementary_dispatch():
    u, _ = jet_at(0.5, 0.0)
    out = jet_elementary("sin", u)
    assert np.max(np.abs(out.coeffs - u.sin().coeffs)) < 1e-15
    with pytest.raises(ValueError):
        jet_elementary("tan", u)


def test_fd_config_validation():
    with pytest.raises(ValueError):
        FDConfig(step=0.0)
    with pytest.raises(ValueError):
        FDConfig(richardson_levels=0)
