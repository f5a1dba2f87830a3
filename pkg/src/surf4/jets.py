"""Truncated bivariate Taylor (jet) arithmetic and finite-difference jets.

A jet of order ``o`` stores the normalized coefficients
``c[i, j] = (d^{i+j} f / du^i dv^j) / (i! j!)`` for ``i + j <= o`` in a dense
triangular array, indexed by total degree and then by ``j``.  Arithmetic is
exact truncation of the corresponding power-series operation, so derivatives
of composed expressions come out at machine precision.  All operations
broadcast over leading batch axes of ``coeffs``; a "scalar" jet has shape
``(ncoeff(order),)``.

``fd_jet`` estimates the order <= 2 part of a jet of a black-box map by
central differences with Richardson extrapolation, the fallback used for
sampled surfaces where no analytic jets exist.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MAX_ORDER",
    "Jet2",
    "FDConfig",
    "JetDomainError",
    "JetDivisionError",
    "StencilError",
    "ncoeff",
    "coeff_index",
    "monomials",
    "jet_binary",
    "jet_elementary",
    "jets_where",
    "fd_jet",
]

MAX_ORDER = 4

# Denominators with constant term at or below this magnitude are rejected.
_DIV_FLOOR = 1e-300


class JetDomainError(ValueError):
    """Elementary function applied outside its domain (log/sqrt/pow)."""


class JetDivisionError(ZeroDivisionError):
    """Division by a jet whose constant term vanishes."""


class StencilError(ValueError):
    """A finite-difference stencil does not fit inside the allowed bounds."""


def ncoeff(order: int) -> int:
    return (order + 1) * (order + 2) // 2


def coeff_index(i: int, j: int) -> int:
    d = i + j
    return d * (d + 1) // 2 + j


@functools.lru_cache(maxsize=None)
def monomials(order: int) -> tuple[tuple[int, int], ...]:
    """(i, j) exponent pairs in storage order (by degree, then by j)."""
    return tuple((d - j, j) for d in range(order + 1) for j in range(d + 1))


@functools.lru_cache(maxsize=None)
def _mul_table(order: int) -> tuple[tuple[tuple[int, int], ...], ...]:
    # For each output coefficient, the list of (index_a, index_b) products
    # feeding it: a 2-d Cauchy convolution restricted to the triangle.
    table = []
    for i, j in monomials(order):
        pairs = []
        for p in range(i + 1):
            for q in range(j + 1):
                pairs.append((coeff_index(p, q), coeff_index(i - p, j - q)))
        table.append(tuple(pairs))
    return tuple(table)


@functools.lru_cache(maxsize=None)
def _deriv_table(order: int, axis: int) -> tuple[tuple[int, int], ...]:
    # (source index, multiplier) for each output coefficient of d/du or d/dv.
    out = []
    for i, j in monomials(order - 1):
        if axis == 0:
            out.append((coeff_index(i + 1, j), i + 1))
        else:
            out.append((coeff_index(i, j + 1), j + 1))
    return tuple(out)


@dataclass(eq=False)
class Jet2:
    """Dense truncated bivariate Taylor expansion, batched over leading axes."""

    order: int
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        if not 0 <= self.order <= MAX_ORDER:
            raise ValueError(f"jet order must be in [0, {MAX_ORDER}], got {self.order}")
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape[-1] != ncoeff(self.order):
            raise ValueError(
                f"coefficient array has {self.coeffs.shape[-1]} entries, "
                f"order {self.order} needs {ncoeff(self.order)}"
            )

    # -- constructors ------------------------------------------------------

    @classmethod
    def constant(cls, value, order: int, batch_shape: tuple[int, ...] = ()) -> "Jet2":
        value = np.asarray(value, dtype=float)
        shape = np.broadcast_shapes(value.shape, batch_shape)
        coeffs = np.zeros(shape + (ncoeff(order),))
        coeffs[..., 0] = value
        return cls(order, coeffs)

    @classmethod
    def variable(cls, value, axis: int, order: int) -> "Jet2":
        """The coordinate function u (axis 0) or v (axis 1) at a point."""
        if axis not in (0, 1):
            raise ValueError("axis must be 0 (u) or 1 (v)")
        jet = cls.constant(value, order)
        if order >= 1:
            jet.coeffs[..., 1 + axis] = 1.0
        return jet

    # -- basic structure ---------------------------------------------------

    @property
    def value(self) -> np.ndarray:
        return self.coeffs[..., 0]

    def coeff(self, i: int, j: int) -> np.ndarray:
        if i < 0 or j < 0 or i + j > self.order:
            raise IndexError(f"coefficient ({i},{j}) outside order-{self.order} jet")
        return self.coeffs[..., coeff_index(i, j)]

    def truncated(self, order: int) -> "Jet2":
        if order > self.order:
            raise ValueError("cannot truncate upward")
        return Jet2(order, self.coeffs[..., : ncoeff(order)].copy())

    def padded(self, order: int) -> "Jet2":
        if order < self.order:
            raise ValueError("cannot pad downward")
        coeffs = np.zeros(self.coeffs.shape[:-1] + (ncoeff(order),))
        coeffs[..., : ncoeff(self.order)] = self.coeffs
        return Jet2(order, coeffs)

    def du(self) -> "Jet2":
        if self.order == 0:
            raise ValueError("order-0 jet has no derivative part")
        src = _deriv_table(self.order, 0)
        out = np.stack([self.coeffs[..., k] * m for k, m in src], axis=-1)
        return Jet2(self.order - 1, out)

    def dv(self) -> "Jet2":
        if self.order == 0:
            raise ValueError("order-0 jet has no derivative part")
        src = _deriv_table(self.order, 1)
        out = np.stack([self.coeffs[..., k] * m for k, m in src], axis=-1)
        return Jet2(self.order - 1, out)

    def poly(self, du, dv) -> np.ndarray:
        """Evaluate the truncated Taylor polynomial at offset (du, dv)."""
        du = np.asarray(du, dtype=float)
        dv = np.asarray(dv, dtype=float)
        acc = 0.0
        for (i, j), k in zip(monomials(self.order), range(ncoeff(self.order))):
            acc = acc + self.coeffs[..., k] * du**i * dv**j
        return np.asarray(acc)

    # -- arithmetic --------------------------------------------------------

    def _coerce(self, other) -> "Jet2":
        if isinstance(other, Jet2):
            if other.order != self.order:
                raise ValueError(
                    f"jet order mismatch: {self.order} vs {other.order}"
                )
            return other
        return Jet2.constant(other, self.order)

    def __add__(self, other) -> "Jet2":
        other = self._coerce(other)
        return Jet2(self.order, self.coeffs + other.coeffs)

    __radd__ = __add__

    def __sub__(self, other) -> "Jet2":
        other = self._coerce(other)
        return Jet2(self.order, self.coeffs - other.coeffs)

    def __rsub__(self, other) -> "Jet2":
        other = self._coerce(other)
        return Jet2(self.order, other.coeffs - self.coeffs)

    def __neg__(self) -> "Jet2":
        return Jet2(self.order, -self.coeffs)

    def __mul__(self, other) -> "Jet2":
        if not isinstance(other, Jet2):
            return Jet2(self.order, self.coeffs * np.asarray(other, dtype=float)[..., None])
        other = self._coerce(other)
        table = _mul_table(self.order)
        a, b = self.coeffs, other.coeffs
        cols = []
        for pairs in table:
            acc = a[..., pairs[0][0]] * b[..., pairs[0][1]]
            for ia, ib in pairs[1:]:
                acc = acc + a[..., ia] * b[..., ib]
            cols.append(acc)
        return Jet2(self.order, np.stack(cols, axis=-1))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Jet2":
        if not isinstance(other, Jet2):
            return Jet2(self.order, self.coeffs / np.asarray(other, dtype=float)[..., None])
        other = self._coerce(other)
        return self * other._reciprocal()

    def __rtruediv__(self, other) -> "Jet2":
        return self._coerce(other) / self

    def _reciprocal(self) -> "Jet2":
        b0 = self.value
        if np.any(np.abs(b0) <= _DIV_FLOOR):
            raise JetDivisionError("jet division by zero")
        series = [1.0 / b0]
        for _ in range(self.order):
            series.append(-series[-1] / b0)
        return _compose(self, np.stack(series))

    # -- elementary functions ----------------------------------------------

    def sin(self) -> "Jet2":
        return _compose(self, _sin_series(self.value, self.order))

    def cos(self) -> "Jet2":
        return _compose(self, _cos_series(self.value, self.order))

    def exp(self) -> "Jet2":
        e0 = np.exp(self.value)
        series = np.stack([e0 / math.factorial(k) for k in range(self.order + 1)])
        return _compose(self, series)

    def log(self) -> "Jet2":
        a0 = self.value
        if np.any(a0 <= 0.0) or not np.all(np.isfinite(a0)):
            raise JetDomainError("jet domain error")
        series = [np.log(a0)]
        for k in range(1, self.order + 1):
            series.append((-1.0) ** (k + 1) / (k * a0**k))
        return _compose(self, np.stack(series))

    def sinh(self) -> "Jet2":
        s0, c0 = np.sinh(self.value), np.cosh(self.value)
        series = [(s0 if k % 2 == 0 else c0) / math.factorial(k) for k in range(self.order + 1)]
        return _compose(self, np.stack(series))

    def cosh(self) -> "Jet2":
        s0, c0 = np.sinh(self.value), np.cosh(self.value)
        series = [(c0 if k % 2 == 0 else s0) / math.factorial(k) for k in range(self.order + 1)]
        return _compose(self, np.stack(series))

    def sqrt(self) -> "Jet2":
        a0 = self.value
        if np.any(a0 <= 0.0) or not np.all(np.isfinite(a0)):
            raise JetDomainError("jet domain error")
        series = [np.sqrt(a0)]
        coef = 0.5
        for k in range(1, self.order + 1):
            series.append(coef * a0 ** (0.5 - k))
            coef *= (0.5 - k) / (k + 1)
        return _compose(self, np.stack(series))

    def powr(self, r: float) -> "Jet2":
        """Power with constant exponent; integer exponents work for any base."""
        if float(r) == int(r):
            return self._int_pow(int(r))
        a0 = self.value
        if np.any(a0 <= 0.0) or not np.all(np.isfinite(a0)):
            raise JetDomainError("jet domain error")
        series = [a0**r]
        coef = r
        for k in range(1, self.order + 1):
            series.append(coef * a0 ** (r - k))
            coef *= (r - k) / (k + 1)
        return _compose(self, np.stack(series))

    def _int_pow(self, n: int) -> "Jet2":
        if n < 0:
            return (self._int_pow(-n))._reciprocal()
        result = Jet2.constant(np.ones_like(self.value), self.order)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base
            n >>= 1
        return result

    def __pow__(self, r) -> "Jet2":
        return self.powr(float(r))


def _sin_series(a0: np.ndarray, order: int) -> np.ndarray:
    s0, c0 = np.sin(a0), np.cos(a0)
    cycle = [s0, c0, -s0, -c0]
    return np.stack([cycle[k % 4] / math.factorial(k) for k in range(order + 1)])


def _cos_series(a0: np.ndarray, order: int) -> np.ndarray:
    s0, c0 = np.sin(a0), np.cos(a0)
    cycle = [c0, -s0, -c0, s0]
    return np.stack([cycle[k % 4] / math.factorial(k) for k in range(order + 1)])


def _compose(inner: Jet2, series: np.ndarray) -> Jet2:
    """Horner evaluation of sum_k series[k] * (inner - inner.value)^k."""
    z_coeffs = inner.coeffs.copy()
    z_coeffs[..., 0] = 0.0
    z = Jet2(inner.order, z_coeffs)
    result = Jet2.constant(np.broadcast_to(series[-1], inner.value.shape).copy(), inner.order)
    for k in range(inner.order - 1, -1, -1):
        result = result * z
        result.coeffs[..., 0] += series[k]
    return result


def jets_where(mask, a: Jet2, b: Jet2) -> Jet2:
    """Lane-wise select between two jets of equal order (batched)."""
    if a.order != b.order:
        raise ValueError("jet order mismatch in jets_where")
    mask = np.asarray(mask, dtype=bool)[..., None]
    return Jet2(a.order, np.where(mask, a.coeffs, np.broadcast_to(b.coeffs, a.coeffs.shape)))


# Named dispatch kept for symmetry with the operation table; operator
# overloads above are the idiomatic entry points.

_BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
}

_ELEMENTARY = ("sin", "cos", "exp", "log", "sinh", "cosh", "sqrt", "pow")


def jet_binary(op: str, a: Jet2, b: Jet2) -> Jet2:
    try:
        return _BINARY[op](a, b)
    except KeyError:
        raise ValueError(f"unknown binary jet operation {op!r}") from None


def jet_elementary(fn: str, a: Jet2, r: float | None = None) -> Jet2:
    if fn not in _ELEMENTARY:
        raise ValueError(f"unknown elementary jet function {fn!r}")
    if fn == "pow":
        if r is None:
            raise ValueError("pow needs an exponent")
        return a.powr(r)
    return getattr(a, fn)()


# -- finite-difference jets --------------------------------------------------


@dataclass(frozen=True)
class FDConfig:
    """Settings for finite-difference jets.

    ``step`` is the largest offset used along each axis; Richardson
    extrapolation combines central differences at step, step/2, ...
    (``richardson_levels`` of them), giving error O(step^(2 levels)) before
    round-off.
    """

    step: float = 1e-4
    richardson_levels: int = 2

    def __post_init__(self) -> None:
        if not self.step > 0.0:
            raise ValueError("fd step must be positive")
        if self.richardson_levels < 1:
            raise ValueError("richardson_levels must be >= 1")


def _richardson(estimates: list[np.ndarray]) -> np.ndarray:
    # estimates[l] computed at step/2^l, each with error expansion in step^2.
    table = list(estimates)
    for m in range(1, len(table)):
        fac = 4.0**m
        table = [
            (fac * table[l + 1] - table[l]) / (fac - 1.0) for l in range(len(table) - 1)
        ]
    return table[0]


def fd_jet(map_fn, at, order: int, cfg: FDConfig = FDConfig(), bounds=None):
    """Finite-difference jet of ``map_fn: (u, v) -> array(m,)`` at a point.

    Returns a tuple of m Jet2 of the requested order (<= 2).  If ``bounds``
    (u0, u1, v0, v1) is given, per-axis steps shrink so the stencil stays
    inside; a point pinned to the boundary raises StencilError rather than
    falling back to one-sided differences.
    """
    if order > 2:
        raise ValueError("fd_jet supports order <= 2")
    u0, v0 = float(at[0]), float(at[1])
    su = sv = cfg.step
    if bounds is not None:
        lo_u, hi_u, lo_v, hi_v = bounds
        if not (lo_u <= u0 <= hi_u and lo_v <= v0 <= hi_v):
            raise StencilError("stencil out of bounds")
        su = min(su, u0 - lo_u, hi_u - u0)
        sv = min(sv, v0 - lo_v, hi_v - v0)
        span = max(hi_u - lo_u, hi_v - lo_v, 1.0)
        if order >= 1 and min(su, sv) <= 1e-14 * span:
            raise StencilError("stencil out of bounds")

    f0 = np.atleast_1d(np.asarray(map_fn(u0, v0), dtype=float))
    m = f0.shape[0]
    n = ncoeff(order)
    coeffs = np.zeros((m, n))
    coeffs[:, 0] = f0
    if order == 0:
        return tuple(Jet2(0, coeffs[i]) for i in range(m))

    levels = cfg.richardson_levels
    fu_p, fu_m, fv_p, fv_m = [], [], [], []
    for lv in range(levels):
        hu, hv = su / 2**lv, sv / 2**lv
        fu_p.append(np.atleast_1d(np.asarray(map_fn(u0 + hu, v0), dtype=float)))
        fu_m.append(np.atleast_1d(np.asarray(map_fn(u0 - hu, v0), dtype=float)))
        fv_p.append(np.atleast_1d(np.asarray(map_fn(u0, v0 + hv), dtype=float)))
        fv_m.append(np.atleast_1d(np.asarray(map_fn(u0, v0 - hv), dtype=float)))

    d_u = _richardson([(fu_p[l] - fu_m[l]) / (2 * su / 2**l) for l in range(levels)])
    d_v = _richardson([(fv_p[l] - fv_m[l]) / (2 * sv / 2**l) for l in range(levels)])
    coeffs[:, coeff_index(1, 0)] = d_u
    coeffs[:, coeff_index(0, 1)] = d_v
    if order == 1:
        return tuple(Jet2(1, coeffs[i]) for i in range(m))

    d_uu = _richardson(
        [(fu_p[l] - 2 * f0 + fu_m[l]) / (su / 2**l) ** 2 for l in range(levels)]
    )
    d_vv = _richardson(
        [(fv_p[l] - 2 * f0 + fv_m[l]) / (sv / 2**l) ** 2 for l in range(levels)]
    )
    cross = []
    for lv in range(levels):
        hu, hv = su / 2**lv, sv / 2**lv
        fpp = np.atleast_1d(np.asarray(map_fn(u0 + hu, v0 + hv), dtype=float))
        fpm = np.atleast_1d(np.asarray(map_fn(u0 + hu, v0 - hv), dtype=float))
        fmp = np.atleast_1d(np.asarray(map_fn(u0 - hu, v0 + hv), dtype=float))
        fmm = np.atleast_1d(np.asarray(map_fn(u0 - hu, v0 - hv), dtype=float))
        cross.append((fpp - fpm - fmp + fmm) / (4 * hu * hv))
    d_uv = _richardson(cross)

    coeffs[:, coeff_index(2, 0)] = d_uu / 2.0
    coeffs[:, coeff_index(1, 1)] = d_uv
    coeffs[:, coeff_index(0, 2)] = d_vv / 2.0
    return tuple(Jet2(2, coeffs[i]) for i in range(m))
