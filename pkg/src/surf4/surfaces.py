"""Immersions (u,v) -> R4: product-of-plane-curves families, expression
surfaces, and sampled grids, all evaluable to jets.

Product surfaces put curve1 in the (x1,x2) plane driven by u and curve2 in
(x3,x4) driven by v.  Built-in curves use their natural parametrization;
circles optionally use arc length so unit products have first fundamental
form exactly du^2 + dv^2.  Sampled surfaces interpolate bicubically and only
support jets up to order 2 (finite differences).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .expr import ExprAst, eval_ast, parse_expression
from .jets import MAX_ORDER, FDConfig, Jet2, fd_jet

__all__ = [
    "SpecError",
    "PlaneCurve",
    "SampledData",
    "SurfaceSpec",
    "Grid",
    "product_surface",
    "expression_surface",
    "sampled_surface",
    "curve_from_json",
    "surface_from_json",
    "surface_to_json",
    "sampled_from_mesh_csv",
    "eval_surface",
    "surface_points",
    "grid_jets",
]

TWO_PI = 2.0 * math.pi


class SpecError(ValueError):
    """A surface/run description that fails validation."""


@lru_cache(maxsize=512)
def _ast(src: str, variables: tuple[str, ...]) -> ExprAst:
    return parse_expression(src, variables)


@dataclass(frozen=True)
class PlaneCurve:
    """One factor of a product surface, living in its own R2."""

    kind: str  # circle | ellipse | expression
    radius: float | None = None
    a: float | None = None
    b: float | None = None
    x_expr: str | None = None
    y_expr: str | None = None
    arc_length: bool = False
    param_range: tuple[float, float] = (0.0, TWO_PI)

    def __post_init__(self) -> None:
        if self.kind == "circle":
            if self.radius is None or not self.radius > 0:
                raise SpecError("circle needs radius > 0")
        elif self.kind == "ellipse":
            if self.a is None or self.b is None or not (self.a >= self.b > 0):
                raise SpecError("ellipse needs a >= b > 0")
            if self.arc_length:
                raise SpecError("arc_length parametrization exists for circles only")
        elif self.kind == "expression":
            if not self.x_expr or not self.y_expr:
                raise SpecError("expression curve needs x_expr and y_expr")
            for src in (self.x_expr, self.y_expr):
                try:
                    _ast(src, ("t",))
                except ValueError as exc:
                    raise SpecError(f"bad curve expression {src!r}: {exc}") from exc
            if self.arc_length:
                raise SpecError("arc_length parametrization exists for circles only")
        else:
            raise SpecError(f"unknown curve kind {self.kind!r}")
        lo, hi = self.param_range
        if not hi > lo:
            raise SpecError("curve param_range is empty")

    def jets(self, t: Jet2) -> tuple[Jet2, Jet2]:
        """The two coordinate functions of the curve as jets in t."""
        if self.kind == "circle":
            angle = t / self.radius if self.arc_length else t
            return angle.cos() * self.radius, angle.sin() * self.radius
        if self.kind == "ellipse":
            return t.cos() * self.a, t.sin() * self.b
        x = eval_ast(_ast(self.x_expr, ("t",)), (t,))
        y = eval_ast(_ast(self.y_expr, ("t",)), (t,))
        return x, y

    def point(self, t: float) -> np.ndarray:
        x, y = self.jets(Jet2.constant(float(t), 0))
        return np.array([x.value, y.value])


class SampledData:
    """Lattice of R4 points with bicubic interpolation per component."""

    def __init__(self, us, vs, points, valid=None):
        self.us = np.asarray(us, dtype=float)
        self.vs = np.asarray(vs, dtype=float)
        self.points = np.asarray(points, dtype=float)
        if self.us.ndim != 1 or self.vs.ndim != 1:
            raise SpecError("sampled lattice axes must be 1-d")
        if self.points.shape != (self.us.size, self.vs.size, 4):
            raise SpecError(
                f"sampled points shape {self.points.shape} does not match "
                f"a {self.us.size}x{self.vs.size} lattice of R4 points"
            )
        if self.us.size < 4 or self.vs.size < 4:
            raise SpecError("sampled lattice needs at least 4 nodes per axis")
        if np.any(np.diff(self.us) <= 0) or np.any(np.diff(self.vs) <= 0):
            raise SpecError("sampled lattice axes must be strictly increasing")
        if not np.all(np.isfinite(self.points)):
            raise SpecError("sampled points contain non-finite values")
        if valid is None:
            valid = np.ones((self.us.size, self.vs.size), dtype=bool)
        self.valid = np.asarray(valid, dtype=bool)

    @cached_property
    def _splines(self):
        return tuple(
            RectBivariateSpline(self.us, self.vs, self.points[:, :, i], kx=3, ky=3)
            for i in range(4)
        )

    def point(self, u, v) -> np.ndarray:
        out = [s(u, v, grid=False) for s in self._splines]
        return np.stack(np.broadcast_arrays(*out), axis=-1)


@dataclass(frozen=True)
class SurfaceSpec:
    """An immersion recipe plus its rectangular parameter domain."""

    kind: str  # product | expression | sampled
    domain: tuple[float, float, float, float]
    curve1: PlaneCurve | None = None
    curve2: PlaneCurve | None = None
    components: tuple[str, str, str, str] | None = None
    samples: SampledData | None = None

    def __post_init__(self) -> None:
        u0, u1, v0, v1 = self.domain
        if not (u1 > u0 and v1 > v0):
            raise SpecError("surface domain is empty")
        if self.kind == "product":
            if self.curve1 is None or self.curve2 is None:
                raise SpecError("product surface needs curve1 and curve2")
        elif self.kind == "expression":
            if self.components is None or len(self.components) != 4:
                raise SpecError("expression surface needs exactly 4 component expressions")
            for src in self.components:
                try:
                    _ast(src, ("u", "v"))
                except ValueError as exc:
                    raise SpecError(f"bad surface expression {src!r}: {exc}") from exc
        elif self.kind == "sampled":
            if self.samples is None:
                raise SpecError("sampled surface needs lattice data")
        else:
            raise SpecError(f"unknown surface kind {self.kind!r}")

    @property
    def analytic(self) -> bool:
        return self.kind in ("product", "expression")

    def contains(self, u, v) -> bool:
        u0, u1, v0, v1 = self.domain
        slack_u = 1e-12 * (u1 - u0)
        slack_v = 1e-12 * (v1 - v0)
        return bool(
            np.all(u >= u0 - slack_u)
            and np.all(u <= u1 + slack_u)
            and np.all(v >= v0 - slack_v)
            and np.all(v <= v1 + slack_v)
        )


def product_surface(curve1: PlaneCurve, curve2: PlaneCurve, domain=None) -> SurfaceSpec:
    if domain is None:
        domain = curve1.param_range + curve2.param_range
    return SurfaceSpec("product", tuple(float(x) for x in domain), curve1=curve1, curve2=curve2)


def expression_surface(components, domain) -> SurfaceSpec:
    return SurfaceSpec(
        "expression",
        tuple(float(x) for x in domain),
        components=tuple(str(c) for c in components),
    )


def sampled_surface(us, vs, points, valid=None) -> SurfaceSpec:
    data = SampledData(us, vs, points, valid)
    domain = (float(data.us[0]), float(data.us[-1]), float(data.vs[0]), float(data.vs[-1]))
    return SurfaceSpec("sampled", domain, samples=data)


# --- JSON descriptions --------------------------------------------------------

_CURVE_FIELDS = {
    "circle": {"kind", "r", "arc_length", "param_range"},
    "ellipse": {"kind", "a", "b", "param_range"},
    "expression": {"kind", "x", "y", "param_range"},
}


def _reject_unknown(obj: dict, allowed: set, what: str) -> None:
    extra = set(obj) - allowed
    if extra:
        raise SpecError(f"unknown field(s) {sorted(extra)} in {what}")


def curve_from_json(obj) -> PlaneCurve:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise SpecError("curve description must be an object with a 'kind' field")
    kind = obj["kind"]
    if kind not in _CURVE_FIELDS:
        raise SpecError(f"unknown curve kind {kind!r}")
    _reject_unknown(obj, _CURVE_FIELDS[kind], f"{kind} curve")
    rng = tuple(float(x) for x in obj.get("param_range", (0.0, TWO_PI)))
    if len(rng) != 2:
        raise SpecError("curve param_range must be [lo, hi]")
    if kind == "circle":
        if "r" not in obj:
            raise SpecError("circle needs field 'r'")
        return PlaneCurve(
            "circle",
            radius=float(obj["r"]),
            arc_length=bool(obj.get("arc_length", False)),
            param_range=rng,
        )
    if kind == "ellipse":
        if "a" not in obj or "b" not in obj:
            raise SpecError("ellipse needs fields 'a' and 'b'")
        return PlaneCurve("ellipse", a=float(obj["a"]), b=float(obj["b"]), param_range=rng)
    if "x" not in obj or "y" not in obj:
        raise SpecError("expression curve needs fields 'x' and 'y'")
    return PlaneCurve("expression", x_expr=str(obj["x"]), y_expr=str(obj["y"]), param_range=rng)


_SURFACE_FIELDS = {
    "product": {"kind", "domain", "curve1", "curve2"},
    "expression": {"kind", "domain", "components"},
    "sampled": {"kind", "path", "us", "vs", "points"},
}


def surface_from_json(obj) -> SurfaceSpec:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise SpecError("surface description must be an object with a 'kind' field")
    kind = obj["kind"]
    if kind not in _SURFACE_FIELDS:
        raise SpecError(f"unknown surface kind {kind!r}")
    _reject_unknown(obj, _SURFACE_FIELDS[kind], f"{kind} surface")
    if kind == "product":
        c1 = curve_from_json(obj.get("curve1"))
        c2 = curve_from_json(obj.get("curve2"))
        domain = obj.get("domain")
        if domain is not None:
            domain = _domain_from_json(domain)
        return product_surface(c1, c2, domain)
    if kind == "expression":
        if "components" not in obj or "domain" not in obj:
            raise SpecError("expression surface needs 'components' and 'domain'")
        comps = obj["components"]
        if not isinstance(comps, (list, tuple)) or len(comps) != 4:
            raise SpecError("expression surface needs exactly 4 component expressions")
        return expression_surface(comps, _domain_from_json(obj["domain"]))
    if "path" in obj:
        if "us" in obj or "vs" in obj or "points" in obj:
            raise SpecError("sampled surface takes either 'path' or inline arrays, not both")
        return sampled_from_mesh_csv(obj["path"])
    for key in ("us", "vs", "points"):
        if key not in obj:
            raise SpecError("inline sampled surface needs 'us', 'vs' and 'points'")
    return sampled_surface(obj["us"], obj["vs"], obj["points"])


def _curve_to_json(curve: PlaneCurve) -> dict:
    out: dict = {"kind": curve.kind}
    if curve.kind == "circle":
        out["r"] = curve.radius
        if curve.arc_length:
            out["arc_length"] = True
    elif curve.kind == "ellipse":
        out["a"] = curve.a
        out["b"] = curve.b
    else:
        out["x"] = curve.x_expr
        out["y"] = curve.y_expr
    if curve.param_range != (0.0, TWO_PI):
        out["param_range"] = list(curve.param_range)
    return out


def surface_to_json(spec: SurfaceSpec) -> dict:
    """Report-header description of a spec; sampled lattices are summarized."""
    if spec.kind == "product":
        return {
            "kind": "product",
            "curve1": _curve_to_json(spec.curve1),
            "curve2": _curve_to_json(spec.curve2),
            "domain": list(spec.domain),
        }
    if spec.kind == "expression":
        return {
            "kind": "expression",
            "components": list(spec.components),
            "domain": list(spec.domain),
        }
    return {
        "kind": "sampled",
        "nu": int(spec.samples.us.size),
        "nv": int(spec.samples.vs.size),
        "domain": list(spec.domain),
    }


def _domain_from_json(dom) -> tuple[float, float, float, float]:
    if not isinstance(dom, (list, tuple)) or len(dom) != 4:
        raise SpecError("domain must be [u0, u1, v0, v1]")
    return tuple(float(x) for x in dom)


def sampled_from_mesh_csv(path) -> SurfaceSpec:
    """Re-ingest a mesh CSV (columns u,v,x1..x4[,rank]) as a sampled surface."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SpecError(f"empty mesh file {path}")
    header = [h.strip() for h in rows[0]]
    need = ["u", "v", "x1", "x2", "x3", "x4"]
    if header[: len(need)] != need:
        raise SpecError(f"mesh file {path} must start with columns {need}")
    has_rank = "rank" in header
    rank_col = header.index("rank") if has_rank else None
    body = np.array([[float(x) for x in row] for row in rows[1:]])
    if body.size == 0:
        raise SpecError(f"mesh file {path} has no data rows")
    order = np.lexsort((body[:, 1], body[:, 0]))
    body = body[order]
    us = np.unique(body[:, 0])
    vs = np.unique(body[:, 1])
    if us.size * vs.size != body.shape[0]:
        raise SpecError(f"mesh file {path} is not a full lattice")
    points = body[:, 2:6].reshape(us.size, vs.size, 4)
    valid = None
    if has_rank:
        valid = body[:, rank_col].reshape(us.size, vs.size) >= 2
    return sampled_surface(us, vs, points, valid)


# --- evaluation ----------------------------------------------------------------

def eval_surface(spec: SurfaceSpec, at, order: int, fd_cfg: FDConfig = FDConfig()):
    """Jets of the 4 coordinate functions at `at` (components may be arrays)."""
    if not 0 <= order <= MAX_ORDER:
        raise ValueError(f"order must be in [0, {MAX_ORDER}]")
    u, v = np.asarray(at[0], dtype=float), np.asarray(at[1], dtype=float)
    if not spec.contains(u, v):
        raise SpecError("evaluation point out of domain")
    if spec.kind == "product":
        uj = Jet2.variable(u, 0, order)
        vj = Jet2.variable(v, 1, order)
        x1, x2 = spec.curve1.jets(uj)
        x3, x4 = spec.curve2.jets(vj)
        return _broadcast_jets((x1, x2, x3, x4), np.broadcast_shapes(u.shape, v.shape))
    if spec.kind == "expression":
        uj = Jet2.variable(u, 0, order)
        vj = Jet2.variable(v, 1, order)
        out = tuple(eval_ast(_ast(src, ("u", "v")), (uj, vj)) for src in spec.components)
        return _broadcast_jets(out, np.broadcast_shapes(u.shape, v.shape))
    if order > 2:
        raise SpecError("sampled surface with order > 2")
    if u.shape or v.shape:
        raise SpecError("sampled surfaces evaluate jets one point at a time")
    return fd_jet(
        lambda uu, vv: spec.samples.point(uu, vv),
        (float(u), float(v)),
        order,
        fd_cfg,
        bounds=spec.domain,
    )


def _broadcast_jets(jets, shape):
    out = []
    for j in jets:
        coeffs = np.broadcast_to(j.coeffs, shape + (j.coeffs.shape[-1],)).copy()
        out.append(Jet2(j.order, coeffs))
    return tuple(out)


def surface_points(spec: SurfaceSpec, U, V) -> np.ndarray:
    """Positions only, shaped broadcast(U, V) + (4,)."""
    U, V = np.asarray(U, dtype=float), np.asarray(V, dtype=float)
    if not spec.contains(U, V):
        raise SpecError("evaluation point out of domain")
    if spec.kind == "sampled":
        return spec.samples.point(U, V)
    jets = eval_surface(spec, (U, V), order=0)
    return np.stack([j.value for j in jets], axis=-1)


@dataclass(frozen=True)
class Grid:
    """Uniform sample lattice over a rectangle (needed by stride differences)."""

    us: np.ndarray
    vs: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "us", np.asarray(self.us, dtype=float))
        object.__setattr__(self, "vs", np.asarray(self.vs, dtype=float))
        for axis in (self.us, self.vs):
            if axis.ndim != 1 or axis.size < 2:
                raise SpecError("grid axes need at least 2 nodes")
            steps = np.diff(axis)
            if np.any(steps <= 0):
                raise SpecError("grid axes must be strictly increasing")
            if np.max(np.abs(steps - steps[0])) > 1e-8 * steps[0]:
                raise SpecError("grid axes must be uniform")

    @classmethod
    def regular(cls, domain, nu: int, nv: int) -> "Grid":
        u0, u1, v0, v1 = domain
        return cls(np.linspace(u0, u1, nu), np.linspace(v0, v1, nv))

    @property
    def nu(self) -> int:
        return self.us.size

    @property
    def nv(self) -> int:
        return self.vs.size

    @property
    def du(self) -> float:
        return float(self.us[1] - self.us[0])

    @property
    def dv(self) -> float:
        return float(self.vs[1] - self.vs[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nu, self.nv)

    def meshes(self):
        return np.meshgrid(self.us, self.vs, indexing="ij")


def grid_jets(values, du: float, dv: float, order: int = 2, levels: int = 2):
    """Order<=2 jets of lattice-sampled fields via stride central differences.

    values has shape (nu, nv, m).  Strides 2^(levels-1)..1 feed Richardson
    extrapolation; the margin ring of width 2^(levels-1) has no centered
    stencil and comes back masked (one-sided differences are not used).
    Returns (list of m batched jets, valid mask).
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 3:
        raise ValueError("grid_jets expects values shaped (nu, nv, m)")
    if order > 2:
        raise ValueError("grid_jets supports order <= 2")
    nu, nv, m = values.shape
    margin = 2 ** (levels - 1)
    if nu <= 2 * margin or nv <= 2 * margin:
        raise SpecError("grid too small for stride differences")

    mask = np.zeros((nu, nv), dtype=bool)
    mask[margin : nu - margin, margin : nv - margin] = True

    def sh(si, sj):
        return np.roll(np.roll(values, -si, axis=0), -sj, axis=1)

    strides = [2 ** (levels - 1 - l) for l in range(levels)]
    from .jets import _richardson, coeff_index, ncoeff  # local import avoids cycle noise

    coeffs = np.zeros((nu, nv, m, ncoeff(order)))
    coeffs[..., 0] = values
    if order >= 1:
        coeffs[..., coeff_index(1, 0)] = _richardson(
            [(sh(s, 0) - sh(-s, 0)) / (2 * s * du) for s in strides]
        )
        coeffs[..., coeff_index(0, 1)] = _richardson(
            [(sh(0, s) - sh(0, -s)) / (2 * s * dv) for s in strides]
        )
    if order >= 2:
        coeffs[..., coeff_index(2, 0)] = 0.5 * _richardson(
            [(sh(s, 0) - 2 * values + sh(-s, 0)) / (s * du) ** 2 for s in strides]
        )
        coeffs[..., coeff_index(0, 2)] = 0.5 * _richardson(
            [(sh(0, s) - 2 * values + sh(0, -s)) / (s * dv) ** 2 for s in strides]
        )
        coeffs[..., coeff_index(1, 1)] = _richardson(
            [
                (sh(s, s) - sh(s, -s) - sh(-s, s) + sh(-s, -s)) / (4 * s * s * du * dv)
                for s in strides
            ]
        )
    jets = [Jet2(order, coeffs[:, :, i, :]) for i in range(m)]
    return jets, mask
