"""Transforms between surfaces built from the canonical section fields.

Every transform is an affine combination of the position map and the section
fields: the evolute x + c, the envelope x - e, the one-parameter family
x + t c - (1 - t) e joining them, and the two-parameter family
x + t1 (e - k) + t2 (c - j) + Z whose members keep their tangent planes
parallel to the source's.  The image is realised on the source grid as node
points plus first and second derivatives, with a per-node rank map taken from
the jacobian's singular values.

Expression-backed sources get jet-accurate image derivatives: c through the
least-squares solve carried in jet arithmetic, e and k through their
derivative-rule completions, Z through the parallel completion.  j stops at
first order (its second derivative would need third derivatives of c, past
the jet budget), so image hessians that involve j take one stride-difference
layer on the exact jacobian field.  Sampled sources use stride differences
throughout.

Endpoint identities are kept bitwise: orthogonal at t = 1 delegates to the
evolute, at t = 0 to the envelope, and zero coefficients skip their term
entirely, so x + 0 * anything is x down to the last bit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field as dc_field

import numpy as np

from .geometry import GridGeometry, Tolerances, jacobian_rank
from .sections import (
    SectionField,
    _geometry_from_fields,
    _jets_to_jac_hess,
    _marginal_mask,
    c_jets_on_grid,
    compute_c_field,
    connection_jets,
    e_completion_jets,
    envelope_jets,
    field_jets,
    make_source,
    normal_completion_jets,
)
from .surfaces import Grid, SurfaceSpec, eval_surface, sampled_surface

__all__ = [
    "TransformSpec",
    "TransformedSurface",
    "section_jacobians",
    "evolute_transform",
    "envelope_transform",
    "orthogonal_transform",
    "parallel_transform",
    "pullback_sections",
    "permutability_defect",
]

_KINDS = ("evolute", "envelope", "orthogonal", "parallel", "shift")


@dataclass
class TransformSpec:
    """Which transform to apply and with which gauge.

    kind    one of evolute | envelope | orthogonal | parallel | shift
    t       weight for the orthogonal family (t = 1 is the evolute, t = 0
            the envelope)
    t1, t2  weights for the two-parameter parallel family
    gauge   base point (u, v) whose flat chart gauges e and k; None means
            whatever gauge the supplied fields carry
    seed    ambient 4-vector seeding the parallel normal field Z for shift
            stages (and optionally parallel ones); Z itself is built by
            transporting the seed from the gauge point
    """

    kind: str
    t: float | None = None
    t1: float | None = None
    t2: float | None = None
    gauge: tuple | None = None
    seed: tuple | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown transform kind '{self.kind}'")
        if self.kind == "orthogonal" and self.t is None:
            raise ValueError("orthogonal transform needs t")
        if self.kind == "parallel" and (self.t1 is None or self.t2 is None):
            raise ValueError("parallel transform needs t1 and t2")
        if self.kind == "shift" and self.seed is None:
            raise ValueError("shift transform needs a seed vector for Z")
        if self.seed is not None:
            if len(self.seed) != 4:
                raise ValueError("seed must be an ambient 4-vector")
            self.seed = tuple(float(x) for x in self.seed)


@dataclass(eq=False)
class TransformedSurface:
    """A transformed surface realised on the source grid.

    images    (nu, nv, 4) image points, defined even at masked nodes
    jac       (nu, nv, 4, 2) first derivatives of the image map
    hess      (nu, nv, 4, 3) second derivatives, pair order uu, uv, vv
    rank_map  per-node rank of jac (0, 1 or 2) from singular values
    marginal  smallest singular value inside the grey band just above the
              rank cutoff; kept out of assertions, kept in meshes
    masked    nodes excluded because an input was undefined there or the
              source is not immersed
    tier      accuracy of jac: "analytic" (jets) or "fd" (stride
              differences); meta["hess_tier"] tracks the hessian route
    """

    source: SurfaceSpec
    transform: TransformSpec
    grid: Grid
    images: np.ndarray
    jac: np.ndarray
    hess: np.ndarray
    rank_map: np.ndarray
    marginal: np.ndarray
    masked: np.ndarray
    tier: str
    meta: dict = dc_field(default_factory=dict)

    @property
    def usable(self) -> np.ndarray:
        """Nodes entering quantitative checks: full rank, not marginal, not masked."""
        return (~self.masked) & (self.rank_map == 2) & (~self.marginal)

    def as_surface(self) -> SurfaceSpec:
        """The image as a sampled surface, for running the pipeline on it."""
        return sampled_surface(self.grid.us, self.grid.vs, self.images)

    def image_geometry(self, tol: Tolerances = Tolerances()) -> GridGeometry:
        """Second-order geometry of the image from the stored derivatives."""
        return _geometry_from_fields(self.images, self.jac, self.hess, tol)


def _combo(base, terms):
    """base + sum of coef * arr over terms, skipping exact-zero coefficients.

    The skip is what makes endpoint members of a family bitwise equal to the
    named transform: a zero weight contributes no float op at all.
    """
    out = np.array(base, dtype=float, copy=True)
    for coef, arr in terms:
        if arr is None or coef == 0.0:
            continue
        out += coef * arr
    return out


def _fd_jac(values, grid: Grid, mask=None, levels: int = 3):
    """Stride-difference jacobian of a node field, (nu, nv, 4, 2)."""
    jets, ok = field_jets(values, grid, mask=mask, order=1, levels=levels)
    cols = [np.stack([j.du().value, j.dv().value], axis=-1) for j in jets]
    return np.stack(cols, axis=-2), ok


def _fd_hess_from_jac(jac, grid: Grid, mask=None, levels: int = 3):
    """One stride-difference layer on a jacobian field, (nu, nv, 4, 3)."""
    flat = jac.reshape(jac.shape[:-2] + (8,))
    jets, ok = field_jets(flat, grid, mask=mask, order=1, levels=levels)
    hess = np.empty(jac.shape[:-2] + (4, 3))
    for c in range(4):
        ju, jv = jets[2 * c], jets[2 * c + 1]
        hess[..., c, 0] = ju.du().value
        hess[..., c, 1] = 0.5 * (ju.dv().value + jv.du().value)
        hess[..., c, 2] = jv.dv().value
    return hess, ok


def _order1_jac(amb_jets):
    """Jacobian values from a 4-list of jets of order >= 1."""
    cols = [
        np.stack([j.du().value, j.dv().value], axis=-1) for j in amb_jets
    ]
    return np.stack(cols, axis=-2)


def section_jacobians(
    spec: SurfaceSpec,
    grid: Grid,
    gg: GridGeometry,
    tol: Tolerances = Tolerances(),
    c_field: SectionField | None = None,
    e_field: SectionField | None = None,
    j_field: SectionField | None = None,
    k_field: SectionField | None = None,
    z_field: SectionField | None = None,
):
    """Node jacobians of section fields, with hessians where available.

    Pass only the fields a transform actually uses.  Analytic sources carry
    each field's derivative rule in jet arithmetic; j is the one field capped
    at first order, so its entry has hess None.  Sampled sources difference
    the node values, which also leaves hess None (callers difference the
    assembled image jacobian instead, one layer on the whole map rather than
    one per field).

    Returns a dict name -> {"jac", "hess", "ok"}.
    """
    source = make_source(spec)
    out = {}
    if source.tier != "analytic":
        for name, fld in (
            ("c", c_field), ("e", e_field), ("j", j_field),
            ("k", k_field), ("z", z_field),
        ):
            if fld is None:
                continue
            jac, ok = _fd_jac(fld.values, grid, mask=fld.mask)
            out[name] = {"jac": jac, "hess": None, "ok": ok}
        return out

    U, V = grid.meshes()
    x_jets = eval_surface(spec, (U, V), 4)
    ones = np.ones(grid.shape, dtype=bool)

    c_jets = None
    if c_field is not None or j_field is not None:
        c_jets, okc = c_jets_on_grid(spec, grid, gg, tol)
    if c_field is not None:
        jac, hess = _jets_to_jac_hess(c_jets)
        out["c"] = {"jac": jac, "hess": hess, "ok": okc}

    comp_jets = None
    if e_field is not None or k_field is not None:
        if e_field is None:
            raise ValueError("k jets need the e field for their normal part")
        amb, comp_jets = e_completion_jets(x_jets, e_field.values, order=2)
        jac, hess = _jets_to_jac_hess(amb)
        out["e"] = {"jac": jac, "hess": hess, "ok": ones}

    if j_field is not None:
        # j is half the metric gradient of |c|^2; the jet budget ends at
        # first order because the gradient eats one order of c.
        conn1 = connection_jets(x_jets, 1)
        s = None
        for cj in c_jets:
            term = cj.truncated(2) * cj.truncated(2)
            s = term if s is None else s + term
        grads = [s.du(), s.dv()]
        ginv, jjac = conn1["ginv"], conn1["jac"]
        jcomp = [
            (ginv[a][0] * grads[0] + ginv[a][1] * grads[1]) * 0.5
            for a in range(2)
        ]
        jamb = [
            jcomp[0] * jjac[0][cc] + jcomp[1] * jjac[1][cc] for cc in range(4)
        ]
        out["j"] = {"jac": _order1_jac(jamb), "hess": None, "ok": okc}

    if k_field is not None:
        # normal part of the k derivative rule: alpha paired with e's
        # components, all order-2 jets
        conn2 = connection_jets(x_jets, 2)
        perp = []
        for m in range(2):
            row = []
            for cc in range(4):
                row.append(
                    comp_jets[0] * conn2["alpha"][m + 0][cc]
                    + comp_jets[1] * conn2["alpha"][m + 1][cc]
                )
            perp.append(row)
        kj = normal_completion_jets(x_jets, k_field.values, order=2, perp_rhs=perp)
        jac, hess = _jets_to_jac_hess(kj)
        out["k"] = {"jac": jac, "hess": hess, "ok": ones}

    if z_field is not None:
        zj = normal_completion_jets(x_jets, z_field.values, order=2)
        jac, hess = _jets_to_jac_hess(zj)
        out["z"] = {"jac": jac, "hess": hess, "ok": ones}

    return out


def _finish(spec, tspec, grid, images, jac, hess, defined, tier, tol, meta):
    rank = jacobian_rank(jac, tol.rank_tol)
    marginal = _marginal_mask(jac, tol.rank_tol)
    return TransformedSurface(
        source=spec, transform=tspec, grid=grid, images=images, jac=jac,
        hess=hess, rank_map=rank, marginal=marginal, masked=~defined,
        tier=tier, meta=meta,
    )


def _gauge_of(*fields):
    for fld in fields:
        if fld is None:
            continue
        chart = fld.meta.get("chart")
        if chart is not None:
            return tuple(chart.base_point)
    return None


def evolute_transform(
    spec: SurfaceSpec,
    grid: Grid,
    c_field: SectionField | None = None,
    gg: GridGeometry | None = None,
    tol: Tolerances = Tolerances(),
) -> TransformedSurface:
    """The evolute x + c.  Nodes where c is undefined come back masked.

    On surfaces whose curvature ellipses pass through the origin the image's
    intrinsic curvature vanishes; rank drops where c stalls (a product of
    curve evolutes loses rank along the cusp lines, a factor circle collapses
    its whole direction).
    """
    source = make_source(spec)
    if gg is None:
        gg = source.node_geometry(grid, tol)
    if c_field is None:
        c_field = compute_c_field(gg, grid, tol)
    tspec = TransformSpec("evolute")
    images = _combo(gg.point, [(1.0, c_field.values)])
    meta = {}
    if source.tier == "analytic":
        ders = section_jacobians(spec, grid, gg, tol, c_field=c_field)
        jac = _combo(gg.jac, [(1.0, ders["c"]["jac"])])
        hess = _combo(gg.hess, [(1.0, ders["c"]["hess"])])
        ok = ders["c"]["ok"]
        tier = meta["hess_tier"] = "analytic"
    else:
        ders = section_jacobians(spec, grid, gg, tol, c_field=c_field)
        jac = _combo(gg.jac, [(1.0, ders["c"]["jac"])])
        hess, okh = _fd_hess_from_jac(jac, grid, mask=c_field.mask & gg.immersed)
        ok = ders["c"]["ok"] & okh
        tier = "fd"
        meta["hess_tier"] = "fd"
    defined = gg.immersed & c_field.mask & ok
    meta["source_geometry"] = gg
    meta["c_mask"] = c_field.mask
    return _finish(spec, tspec, grid, images, jac, hess, defined, tier, tol, meta)


def envelope_transform(
    spec: SurfaceSpec,
    grid: Grid,
    e_field: SectionField,
    gg: GridGeometry | None = None,
    tol: Tolerances = Tolerances(),
) -> TransformedSurface:
    """The envelope x - e of the flat chart gauged at e's base point.

    Rank drops exactly where e vanishes (the base point always does) or
    where its derivative degenerates; on sources whose curvature ellipses
    pass through the origin the image inherits that property.
    """
    source = make_source(spec)
    if gg is None:
        gg = source.node_geometry(grid, tol)
    tspec = TransformSpec("envelope", gauge=_gauge_of(e_field))
    images, jac, hess, ok = envelope_jets(source, grid, e_field.values)
    defined = gg.immersed & e_field.mask & ok
    tier = source.tier if source.tier == "analytic" else "fd"
    meta = {
        "hess_tier": tier,
        "source_geometry": gg,
        "e_mask": e_field.mask,
    }
    return _finish(spec, tspec, grid, images, jac, hess, defined, tier, tol, meta)


def orthogonal_transform(
    spec: SurfaceSpec,
    grid: Grid,
    t: float,
    c_field: SectionField,
    e_field: SectionField,
    gg: GridGeometry | None = None,
    tol: Tolerances = Tolerances(),
) -> TransformedSurface:
    """The family x + t c - (1 - t) e; images meet the source orthogonally.

    t = 1 delegates to the evolute and t = 0 to the envelope, so the
    endpoints agree with the named transforms bitwise, masks included.
    """
    tspec = TransformSpec("orthogonal", t=float(t), gauge=_gauge_of(e_field))
    if t == 1.0:
        ts = evolute_transform(spec, grid, c_field=c_field, gg=gg, tol=tol)
        return dataclasses.replace(ts, transform=tspec)
    if t == 0.0:
        ts = envelope_transform(spec, grid, e_field, gg=gg, tol=tol)
        return dataclasses.replace(ts, transform=tspec)

    source = make_source(spec)
    if gg is None:
        gg = source.node_geometry(grid, tol)
    images = _combo(
        gg.point, [(t, c_field.values), (-(1.0 - t), e_field.values)]
    )
    ders = section_jacobians(spec, grid, gg, tol, c_field=c_field, e_field=e_field)
    jac = _combo(
        gg.jac, [(t, ders["c"]["jac"]), (-(1.0 - t), ders["e"]["jac"])]
    )
    meta = {}
    if source.tier == "analytic":
        hess = _combo(
            gg.hess, [(t, ders["c"]["hess"]), (-(1.0 - t), ders["e"]["hess"])]
        )
        ok = ders["c"]["ok"] & ders["e"]["ok"]
        tier = meta["hess_tier"] = "analytic"
    else:
        hess, okh = _fd_hess_from_jac(
            jac, grid, mask=c_field.mask & e_field.mask & gg.immersed
        )
        ok = ders["c"]["ok"] & ders["e"]["ok"] & okh
        tier = "fd"
        meta["hess_tier"] = "fd"
    defined = gg.immersed & c_field.mask & e_field.mask & ok
    meta["source_geometry"] = gg
    return _finish(spec, tspec, grid, images, jac, hess, defined, tier, tol, meta)


def orthogonal_stage(
    prev: TransformedSurface,
    t: float,
    c_field: SectionField,
    e_field: SectionField,
    c_jac=None,
    e_jac=None,
    tol: Tolerances = Tolerances(),
) -> TransformedSurface:
    """Weight-t member over an already transformed surface.

    Pullback fields are formulas in the source fields, so when their exact
    jacobians are supplied the chain rule stays on the source grid and the
    image jacobian is a plain combination with prev.jac; stride differences
    on the assembled images would drown in the pullback fields' third
    derivatives.  The hessian always takes one stride layer on the jacobian.
    """
    t = float(t)
    grid = prev.grid
    tspec = TransformSpec("orthogonal", t=t, gauge=e_field.meta.get("gauge"))
    images = _combo(prev.images, [(t, c_field.values), (-(1.0 - t), e_field.values)])
    defined = (~prev.masked) & c_field.mask & e_field.mask
    if c_jac is not None and e_jac is not None:
        jac = _combo(prev.jac, [(t, c_jac), (-(1.0 - t), e_jac)])
        tier = prev.tier
    else:
        jac, ok = _fd_jac(images, grid, mask=defined)
        defined &= ok
        tier = "fd"
    hess, okh = _fd_hess_from_jac(jac, grid, mask=defined)
    meta = {"hess_tier": "fd", "previous": prev}
    return _finish(prev.as_surface(), tspec, grid, images, jac, hess, defined,
                   tier, tol, meta)


def parallel_transform(
    spec: SurfaceSpec,
    grid: Grid,
    t1: float,
    t2: float,
    c_field: SectionField,
    e_field: SectionField,
    j_field: SectionField,
    k_field: SectionField,
    z_field: SectionField | None = None,
    gg: GridGeometry | None = None,
    tol: Tolerances = Tolerances(),
) -> TransformedSurface:
    """The family x + t1 (e - k) + t2 (c - j) + Z with parallel tangent planes.

    Z, when given, must be a parallel normal field; anything else changes the
    tangent plane and is rejected up front.  t1 = t2 = 0 with no Z is the
    identity, bit for bit.
    """
    source = make_source(spec)
    if gg is None:
        gg = source.node_geometry(grid, tol)
    t1 = float(t1)
    t2 = float(t2)
    tspec = TransformSpec("parallel", t1=t1, t2=t2, gauge=_gauge_of(e_field, k_field))

    if z_field is not None:
        if z_field.bundle != "normal":
            raise ValueError("Z must be a normal field")
        zjac, okz = _fd_jac(z_field.values, grid, mask=z_field.mask)
        good = z_field.mask & gg.immersed & okz
        perp_u = np.abs(
            np.einsum("...c,...c->...", gg.n1, zjac[..., 0])
        ) + np.abs(np.einsum("...c,...c->...", gg.n2, zjac[..., 0]))
        perp_v = np.abs(
            np.einsum("...c,...c->...", gg.n1, zjac[..., 1])
        ) + np.abs(np.einsum("...c,...c->...", gg.n2, zjac[..., 1]))
        defect = float(np.max(np.where(good, np.maximum(perp_u, perp_v), 0.0)))
        # the gate separates parallel (stride noise, ~h^2 |Z|) from not
        # parallel (order |Z|), so it is scale-aware rather than a precision
        # tolerance
        gate = max(
            0.01 * (1.0 + float(np.max(np.linalg.norm(z_field.values, axis=-1)))),
            tol.fd_flatness_tol,
        )
        if defect > gate:
            raise ValueError(
                f"Z is not a parallel normal field (defect {defect:.3e})"
            )

    use1 = t1 != 0.0
    use2 = t2 != 0.0
    ek = e_field.values - k_field.values if use1 else None
    cj = c_field.values - j_field.values if use2 else None
    zv = z_field.values if z_field is not None else None
    images = _combo(gg.point, [(t1, ek), (t2, cj), (1.0, zv)])

    ders = section_jacobians(
        spec, grid, gg, tol,
        c_field=c_field if use2 else None,
        e_field=e_field if use1 else None,
        j_field=j_field if use2 else None,
        k_field=k_field if use1 else None,
        z_field=z_field,
    )
    djac = {name: d["jac"] for name, d in ders.items()}
    jac_terms = []
    if use1:
        jac_terms.append((t1, djac["e"] - djac["k"]))
    if use2:
        jac_terms.append((t2, djac["c"] - djac["j"]))
    if z_field is not None:
        jac_terms.append((1.0, djac["z"]))
    jac = _combo(gg.jac, jac_terms)

    meta = {"source_geometry": gg}
    ok = np.ones(grid.shape, dtype=bool)
    for d in ders.values():
        ok &= d["ok"]
    if source.tier == "analytic":
        tier = "analytic"
        hess_terms = []
        if use1:
            hess_terms.append((t1, ders["e"]["hess"] - ders["k"]["hess"]))
        if use2:
            # j has no exact hessian; difference its exact jacobian instead
            hj, okh = _fd_hess_from_jac(
                ders["j"]["jac"], grid, mask=gg.immersed & j_field.mask
            )
            ok &= okh
            hess_terms.append((t2, ders["c"]["hess"] - hj))
        if z_field is not None:
            hess_terms.append((1.0, ders["z"]["hess"]))
        hess = _combo(gg.hess, hess_terms)
        meta["hess_tier"] = "fd" if use2 else "analytic"
    else:
        tier = "fd"
        inner = gg.immersed.copy()
        for fld in (c_field, e_field, j_field, k_field, z_field):
            if fld is not None:
                inner &= fld.mask
        hess, okh = _fd_hess_from_jac(jac, grid, mask=inner)
        ok &= okh
        meta["hess_tier"] = "fd"

    defined = gg.immersed & ok
    if use1:
        defined &= e_field.mask & k_field.mask
    if use2:
        defined &= c_field.mask & j_field.mask
    if z_field is not None:
        defined &= z_field.mask
    return _finish(spec, tspec, grid, images, jac, hess, defined, tier, tol, meta)


def pullback_sections(
    image: TransformedSurface,
    c_field: SectionField,
    e_field: SectionField,
    j_field: SectionField,
    k_field: SectionField | None = None,
):
    """Section fields of an orthogonal-family image, written in source data.

    For the member with weight t the image's own sections are combinations of
    the source's: its c is (1 - t) e - t j and its e is t c - (1 - t) k, both
    read along the transform (same grid node, image point).  Because the
    image's tangent plane is the source's normal plane, the returned c is
    bundle "normal" and the returned e bundle "tangent" as fields over the
    source chart.

    k only enters through the 1 - t weight; asking for it at t = 1 is an
    error, and omitting it anywhere else is one too.
    """
    kind = image.transform.kind
    if kind == "evolute":
        t = 1.0
    elif kind == "envelope":
        t = 0.0
    elif kind == "orthogonal":
        t = float(image.transform.t)
    else:
        raise ValueError("pullback needs an orthogonal-family image")
    if t == 1.0 and k_field is not None:
        raise ValueError("t = 1 with k requested")
    if t != 1.0 and k_field is None:
        raise ValueError("pullback at t != 1 needs the k field")

    grid = image.grid
    zero = np.zeros(grid.shape + (4,))
    c_vals = _combo(zero, [(1.0 - t, e_field.values), (-t, j_field.values)])
    e_vals = _combo(
        zero,
        [(t, c_field.values),
         (-(1.0 - t), k_field.values if k_field is not None else None)],
    )

    mask_c = image.usable.copy()
    if t != 1.0:
        mask_c &= e_field.mask
    if t != 0.0:
        mask_c &= j_field.mask
    mask_e = image.usable.copy()
    if t != 0.0:
        mask_e &= c_field.mask
    if t != 1.0:
        mask_e &= k_field.mask

    meta = {"pullback_t": t, "gauge": image.transform.gauge}
    c_tilde = SectionField("normal", grid, c_vals, mask_c, meta=dict(meta))
    e_tilde = SectionField("tangent", grid, e_vals, mask_e, meta=dict(meta))
    return c_tilde, e_tilde


def _orthogonal_jac(gg, t, ders):
    """Exact image jacobian of the weight-t member from section jacobians."""
    return _combo(
        gg.jac, [(t, ders["c"]["jac"]), (-(1.0 - t), ders["e"]["jac"])]
    )


def permutability_defect(
    spec: SurfaceSpec,
    grid: Grid,
    t1: float,
    t2: float,
    c_field: SectionField,
    e_field: SectionField,
    j_field: SectionField,
    k_field: SectionField,
    gg: GridGeometry | None = None,
    tol: Tolerances = Tolerances(),
):
    """Compare the two orders of composing weight-t1 and weight-t2 members.

    Route A applies the weight-t2 transform to the weight-t1 image, whose
    sections come from pullback_sections; route B swaps the weights.  Their
    difference delta is checked to be a parallel normal field, and each route
    is also compared against the closed combination
    x + t1 t2 (c - j) - (1 - t1)(1 - t2) (e - k), which the composites can
    differ from only by a parallel normal field.

    Returns (delta, parallel_defect) where delta is a normal-bundle field on
    the source grid and parallel_defect the largest normal component of
    delta's derivative over the working nodes.  delta.meta carries the
    intermediate and composite surfaces plus the per-check numbers.
    """
    source = make_source(spec)
    if gg is None:
        gg = source.node_geometry(grid, tol)
    t1 = float(t1)
    t2 = float(t2)

    stage1_a = orthogonal_transform(spec, grid, t1, c_field, e_field, gg=gg, tol=tol)
    stage1_b = orthogonal_transform(spec, grid, t2, c_field, e_field, gg=gg, tol=tol)
    ca, ea = pullback_sections(
        stage1_a, c_field, e_field, j_field,
        None if t1 == 1.0 else k_field,
    )
    cb, eb = pullback_sections(
        stage1_b, c_field, e_field, j_field,
        None if t2 == 1.0 else k_field,
    )
    stage2_a = orthogonal_transform(stage1_a.as_surface(), grid, t2, ca, ea, tol=tol)
    stage2_b = orthogonal_transform(stage1_b.as_surface(), grid, t1, cb, eb, tol=tol)

    route_a = stage2_a.images
    route_b = stage2_b.images
    ekv = e_field.values - k_field.values
    cjv = c_field.values - j_field.values
    route_c = _combo(
        gg.point,
        [(t1 * t2, cjv), (-(1.0 - t1) * (1.0 - t2), ekv)],
    )

    # the route images are value combinations of the pullback fields, so the
    # working set follows those masks rather than the fd-tier flags of the
    # stage-2 objects (whose stencils erode several boundary layers)
    work = (
        gg.immersed
        & stage1_a.usable & stage1_b.usable
        & ca.mask & ea.mask & cb.mask & eb.mask
        & c_field.mask & e_field.mask & j_field.mask & k_field.mask
    )
    delta_vals = route_a - route_b

    # exact route jacobians from the source-side section derivatives; the
    # pullback fields are formulas in the source fields, so the chain rule
    # stays on the source grid
    ders = section_jacobians(
        spec, grid, gg, tol,
        c_field=c_field, e_field=e_field, j_field=j_field, k_field=k_field,
    )
    ok = np.ones(grid.shape, dtype=bool)
    for d in ders.values():
        ok &= d["ok"]
    work &= ok
    dc, de = ders["c"]["jac"], ders["e"]["jac"]
    dj, dk = ders["j"]["jac"], ders["k"]["jac"]

    def composite_jac(ta, tb):
        # d(stage2) = d(stage1) + tb * d(c tilde) - (1 - tb) * d(e tilde)
        d_stage1 = _combo(gg.jac, [(ta, dc), (-(1.0 - ta), de)])
        d_ct = _combo(np.zeros_like(dc), [(1.0 - ta, de), (-ta, dj)])
        d_et = _combo(np.zeros_like(dc), [(ta, dc), (-(1.0 - ta), dk)])
        return _combo(d_stage1, [(tb, d_ct), (-(1.0 - tb), d_et)])

    jac_a = composite_jac(t1, t2)
    jac_b = composite_jac(t2, t1)
    jac_c = _combo(
        gg.jac,
        [(t1 * t2, dc - dj), (-(1.0 - t1) * (1.0 - t2), de - dk)],
    )

    def tangent_defect(vals):
        du = np.abs(np.einsum("...c,...c->...", gg.t1, vals))
        dv = np.abs(np.einsum("...c,...c->...", gg.t2, vals))
        return np.maximum(du, dv)

    def perp_derivative_defect(jac_diff):
        out = np.zeros(grid.shape)
        for m in range(2):
            col = jac_diff[..., m]
            comp = np.abs(np.einsum("...c,...c->...", gg.n1, col))
            comp = np.maximum(
                comp, np.abs(np.einsum("...c,...c->...", gg.n2, col))
            )
            out = np.maximum(out, comp)
        return out

    def masked_max(arr):
        if not np.any(work):
            return float("nan")
        return float(np.max(np.where(work, arr, 0.0)))

    normality = masked_max(tangent_defect(delta_vals))
    parallel_defect = masked_max(perp_derivative_defect(jac_a - jac_b))
    route_checks = {}
    for label, pts, jc in (("a", route_a, jac_a), ("b", route_b, jac_b)):
        diff = pts - route_c
        route_checks[label] = {
            "normality": masked_max(tangent_defect(diff)),
            "parallel_defect": masked_max(perp_derivative_defect(jc - jac_c)),
        }

    delta = SectionField(
        "normal", grid, delta_vals, work,
        meta={
            "t1": t1,
            "t2": t2,
            "normality": normality,
            "parallel_defect": parallel_defect,
            "route_vs_closed": route_checks,
            "route_c": route_c,
            "stage1": (stage1_a, stage1_b),
            "stage2": (stage2_a, stage2_b),
        },
    )
    return delta, parallel_defect
