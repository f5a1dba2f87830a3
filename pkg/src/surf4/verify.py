"""Named, tolerance-driven checks over a surface and a transform pipeline.

Every identity the library claims becomes one CheckReport: an error
magnitude, the tolerance it was held to, how many nodes took part and which
node was worst.  Failures are reports, not exceptions, so a batch run always
produces a full document.

A check whose masked fraction exceeds half the grid is reported as
"inconclusive" rather than passed: the identities are local statements, and
a mostly-degenerate grid should not pass vacuously.  The boolean `passed`
still follows max_error < tolerance exactly; status is the three-valued
refinement.

Derivative-based checks pick their tolerance by tier: jets back the
analytic tier, stride differences the fd tier, and the fd defaults are
orders of magnitude looser because the residual is dominated by h^2 terms
of fields with large third derivatives, not by the identity under test.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from .geometry import (
    INFLECTION,
    GridGeometry,
    Tolerances,
    classify_grid,
    normal_degeneracy,
)
from .sections import (
    FlatnessError,
    SectionField,
    _tangent_comps,
    build_flat_chart,
    c_jets_on_grid,
    cell_holonomy,
    chart_field_derivatives,
    compute_c_field,
    compute_e,
    compute_j,
    compute_k,
    erode_mask,
    make_source,
    parallel_field,
)
from .surfaces import Grid, SpecError, SurfaceSpec, surface_to_json
from .transforms import (
    TransformSpec,
    TransformedSurface,
    _fd_jac,
    envelope_transform,
    evolute_transform,
    orthogonal_stage,
    orthogonal_transform,
    parallel_transform,
    permutability_defect,
    pullback_sections,
    section_jacobians,
)

__all__ = [
    "CheckReport",
    "SuiteFields",
    "StageResult",
    "VERSION",
    "build_suite_fields",
    "default_check_tolerances",
    "run_suite",
    "run_suite_full",
    "report_document",
    "dumps_document",
]

VERSION = "0.1.0"


@dataclass
class CheckReport:
    """One named invariant check over the grid."""

    name: str
    max_error: float
    tolerance: float
    nodes_checked: int
    nodes_masked: int
    passed: bool
    worst_node: tuple | None

    @property
    def status(self) -> str:
        total = self.nodes_checked + self.nodes_masked
        if total == 0 or self.nodes_masked > 0.5 * total:
            return "inconclusive"
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_error": self.max_error,
            "tolerance": self.tolerance,
            "nodes_checked": self.nodes_checked,
            "nodes_masked": self.nodes_masked,
            "pass": self.passed,
            "status": self.status,
            "worst_node": list(self.worst_node) if self.worst_node else None,
        }


# Defaults per check name, (analytic tier, fd tier).  The fd column reflects
# stride-difference floors measured on the built-in families, not the
# sharpness of the identities.
_CHECK_DEFAULTS = {
    "frame_orthonormality": ("frame_tol", "frame_tol"),
    "c_alpha_equals_g": (1e-8, 1e-3),
    "c_two_formulas_agree": (1e-9, 1e-3),
    "c_transport_orthogonality": (1e-4, 1e-1),
    "j_two_formulas_agree": (1e-4, 1e-1),
    "holonomy_tangent": (1e-8, 1e-4),
    "holonomy_normal": (1e-8, 1e-4),
    "e_defining_eq": (1e-4, 1e-2),
    "k_defining_eq": (1e-4, 5e-2),
    "orthogonality": (1e-4, 5e-2),
    "parallelism": (1e-4, 5e-2),
    "image_flatness": ("flatness_tol", 1e-2),
    "image_normal_flatness": ("flatness_tol", 1e-2),
    "image_no_inflection": (1.0, 1.0),
    "rank_map_consistency": (1.0, 1.0),
    "permutability": (1e-3, 1e-1),
}


def default_check_tolerances(tol: Tolerances, tier: str) -> dict:
    col = 0 if tier == "analytic" else 1
    out = {}
    for name, pair in _CHECK_DEFAULTS.items():
        v = pair[col]
        out[name] = float(getattr(tol, v)) if isinstance(v, str) else float(v)
    return out


def _base_name(name: str) -> str:
    stem, _, suffix = name.rpartition("_")
    return stem if suffix.isdigit() else name


class _TolTable:
    def __init__(self, tol, overrides):
        self.tol = tol
        self.overrides = dict(overrides or {})

    def get(self, name: str, tier: str) -> float:
        for key in (name, _base_name(name)):
            if key in self.overrides:
                return float(self.overrides[key])
        return default_check_tolerances(self.tol, tier)[_base_name(name)]


def _node_of(grid: Grid, idx) -> tuple:
    return (float(grid.us[idx[0]]), float(grid.vs[idx[1]]))


def _report(name, err_map, checked, tolerance, grid) -> CheckReport:
    checked = np.asarray(checked, dtype=bool)
    n = int(np.count_nonzero(checked))
    masked = checked.size - n
    if n == 0:
        return CheckReport(name, 0.0, tolerance, 0, masked, True, None)
    vals = np.where(checked, err_map, -np.inf)
    idx = np.unravel_index(int(np.argmax(vals)), vals.shape)
    worst = float(err_map[idx])
    return CheckReport(name, worst, tolerance, n, masked,
                       bool(worst < tolerance), _node_of(grid, idx))


def _count_report(name, flag_map, checked, tolerance, grid) -> CheckReport:
    """Counting check: max_error is the number of offending nodes."""
    checked = np.asarray(checked, dtype=bool)
    n = int(np.count_nonzero(checked))
    masked = checked.size - n
    if n == 0:
        return CheckReport(name, 0.0, tolerance, 0, masked, True, None)
    bad = flag_map & checked
    count = float(np.count_nonzero(bad))
    worst = None
    if count:
        idx = np.unravel_index(int(np.argmax(bad)), bad.shape)
        worst = _node_of(grid, idx)
    return CheckReport(name, count, tolerance, n, masked,
                       bool(count < tolerance), worst)


# --- field assembly ---------------------------------------------------------------


@dataclass(eq=False)
class SuiteFields:
    """Everything the checks consume, with None where a construction failed."""

    spec: SurfaceSpec
    grid: Grid
    source: object
    gg: GridGeometry
    tier: str
    c: SectionField | None = None
    c_jets: list | None = None
    e: SectionField | None = None
    j: SectionField | None = None
    k: SectionField | None = None
    de: tuple | None = None
    prev_ts: TransformedSurface | None = None
    pull_jacs: tuple | None = None
    notes: dict = dc_field(default_factory=dict)


def build_suite_fields(spec: SurfaceSpec, grid: Grid, tol: Tolerances,
                       base=None, want_k: bool = True) -> SuiteFields:
    source = make_source(spec)
    gg = source.node_geometry(grid, tol)
    out = SuiteFields(spec, grid, source, gg, source.tier)

    out.c = compute_c_field(gg, grid, tol)
    if spec.analytic and out.c.mask.any():
        cj, okc = c_jets_on_grid(spec, grid, gg, tol)
        if okc.any():
            out.c_jets = cj
    if out.c.mask.any():
        out.j = compute_j(gg, out.c, grid, tol, c_jets=out.c_jets)

    try:
        chart = build_flat_chart(spec, grid, base=base, tol=tol, gg=gg,
                                 check_holonomy=False)
    except (FlatnessError, SpecError) as exc:
        out.notes["chart"] = str(exc)
        chart = None
    if chart is not None:
        out.e = compute_e(chart, gg)
        out.de = chart_field_derivatives(chart, source)
        if want_k:
            try:
                out.k = compute_k(spec, grid, out.e, gg, tol, base=base)
            except (FlatnessError, SpecError, ValueError) as exc:
                out.notes["k"] = str(exc)
    return out


# --- individual checks ------------------------------------------------------------


def _check_frame(f: SuiteFields, tolerance) -> CheckReport:
    rows = np.stack([f.gg.t1, f.gg.t2, f.gg.n1, f.gg.n2], axis=-2)
    gram = np.einsum("...ic,...jc->...ij", rows, rows)
    err = np.max(np.abs(gram - np.eye(4)), axis=(-2, -1))
    return _report("frame_orthonormality", err, f.gg.immersed, tolerance, f.grid)


def _check_c_alpha(f: SuiteFields, tolerance) -> CheckReport:
    gg = f.gg
    checked = gg.immersed & f.c.mask
    pairs = (
        (gg.alpha_uu, gg.g[..., 0, 0]),
        (gg.alpha_uv, gg.g[..., 0, 1]),
        (gg.alpha_vv, gg.g[..., 1, 1]),
    )
    err = np.zeros(f.grid.shape)
    for alpha, gval in pairs:
        r = np.abs(np.einsum("...c,...c->...", f.c.values, alpha) - gval)
        err = np.maximum(err, r)
    return _report("c_alpha_equals_g", err, checked, tolerance, f.grid)


def _check_c_two_formulas(f: SuiteFields, tolerance) -> CheckReport:
    near = f.c.meta["nearest_point"]
    gap = np.linalg.norm(f.c.values - near, axis=-1)
    rel = gap / (1.0 + np.linalg.norm(f.c.values, axis=-1))
    return _report("c_two_formulas_agree", rel, f.gg.immersed & f.c.mask,
                   tolerance, f.grid)


def _c_jacobian(f: SuiteFields):
    if f.c_jets is not None:
        jac = np.stack(
            [np.stack([j.du().value for j in f.c_jets], axis=-1),
             np.stack([j.dv().value for j in f.c_jets], axis=-1)], axis=-1)
        return jac, f.c.mask
    jac, ok = _fd_jac(f.c.values, f.grid, mask=f.c.mask)
    return jac, f.c.mask & ok


def _check_c_transport(f: SuiteFields, tolerance) -> CheckReport:
    # the normal derivative of c along one curvature direction has no
    # component on the second form of the other one
    gg = f.gg
    cjac, ok = _c_jacobian(f)
    a1 = _tangent_comps(gg, gg.t1)
    a2 = _tangent_comps(gg, gg.t2)
    d1 = a1[..., :1] * cjac[..., 0] + a1[..., 1:] * cjac[..., 1]
    d2 = a2[..., :1] * cjac[..., 0] + a2[..., 1:] * cjac[..., 1]

    def perp(vec):
        # normal-frame components, matching how b1/b3 are stored
        return np.stack([np.einsum("...c,...c->...", vec, gg.n1),
                         np.einsum("...c,...c->...", vec, gg.n2)], axis=-1)

    r1 = np.abs(np.einsum("...a,...a->...", gg.b1, perp(d2)))
    r2 = np.abs(np.einsum("...a,...a->...", gg.b3, perp(d1)))
    err = np.maximum(r1, r2)
    return _report("c_transport_orthogonality", err, gg.immersed & ok,
                   tolerance, f.grid)


def _check_j_formulas(f: SuiteFields, tolerance) -> CheckReport:
    grad = f.j.meta["gradient_values"]
    err = np.max(np.abs(f.j.values - grad), axis=-1)
    return _report("j_two_formulas_agree", err, f.j.mask, tolerance, f.grid)


def _check_holonomy(f: SuiteFields, bundle: str, tolerance) -> CheckReport:
    grid = f.grid
    nu, nv = grid.shape
    corners = (f.gg.immersed[:-1, :-1] & f.gg.immersed[1:, :-1]
               & f.gg.immersed[:-1, 1:] & f.gg.immersed[1:, 1:])
    err = np.zeros(grid.shape)
    checked = np.zeros(grid.shape, dtype=bool)
    name = f"holonomy_{bundle}"
    if corners.any():
        if bundle == "tangent":
            seeds = np.broadcast_to(np.eye(2), (nu - 1, nv - 1, 2, 2))
            defects = cell_holonomy(f.source, grid, tang_seeds=np.array(seeds))
        else:
            seeds = np.stack([f.gg.n1, f.gg.n2], axis=2)[:-1, :-1]
            defects = cell_holonomy(f.source, grid, norm_seeds=seeds)
        err[:-1, :-1] = np.where(corners, defects, 0.0)
        checked[:-1, :-1] = corners
    return _report(name, err, checked, tolerance, grid)


def _check_e_defining(f: SuiteFields, tolerance) -> CheckReport:
    gg = f.gg
    checked = np.zeros(f.grid.shape, dtype=bool)
    if f.e is None or f.de is None:
        return _report("e_defining_eq", np.zeros(f.grid.shape), checked,
                       tolerance, f.grid)
    w = _tangent_comps(gg, f.e.values)
    alpha_rows = (
        w[..., :1] * gg.alpha_uu + w[..., 1:] * gg.alpha_uv,
        w[..., :1] * gg.alpha_uv + w[..., 1:] * gg.alpha_vv,
    )
    err = np.zeros(f.grid.shape)
    for m, dm in enumerate(f.de):
        r = dm - gg.jac[..., m] - alpha_rows[m]
        err = np.maximum(err, np.max(np.abs(r), axis=-1))
    return _report("e_defining_eq", err, gg.immersed & f.e.mask, tolerance, f.grid)


def _check_k_defining(f: SuiteFields, tolerance) -> CheckReport:
    checked = np.zeros(f.grid.shape, dtype=bool)
    if f.k is None or f.de is None:
        return _report("k_defining_eq", np.zeros(f.grid.shape), checked,
                       tolerance, f.grid)
    gg = f.gg
    vchart, vsource = f.k.meta["vchart"], f.k.meta["vsource"]
    i0, i1, j0, j1 = f.k.meta["subgrid"]
    dk_us, dk_vs = chart_field_derivatives(vchart, vsource)
    if dk_us.shape[0] != i1 - i0:
        # the construction chart may live on a refined sublattice; pick out
        # the nodes that coincide with the coarse subgrid
        r = (dk_us.shape[0] - 1) // (i1 - i0 - 1)
        dk_us = dk_us[::r, ::r]
        dk_vs = dk_vs[::r, ::r]
    err = np.zeros(f.grid.shape)
    for m, dk_sub in enumerate((dk_us, dk_vs)):
        dk = np.zeros(f.grid.shape + (4,))
        dk[i0:i1, j0:j1] = -dk_sub
        r = dk - f.de[m]
        rn = np.abs(np.einsum("...c,...c->...", r, gg.n1)) + np.abs(
            np.einsum("...c,...c->...", r, gg.n2))
        err = np.maximum(err, rn)
    return _report("k_defining_eq", err, f.k.mask & f.e.mask, tolerance, f.grid)


# --- pipeline stages --------------------------------------------------------------


@dataclass(eq=False)
class StageResult:
    index: int
    tspec: TransformSpec
    ts: TransformedSurface | None
    igg: GridGeometry | None
    input_gg: GridGeometry
    tier: str
    note: str = ""
    fields_in: "SuiteFields | None" = None


def _apply_stage(fields: SuiteFields, tspec: TransformSpec, tol, base):
    spec, grid, gg = fields.spec, fields.grid, fields.gg
    kind = tspec.kind
    if fields.prev_ts is not None and kind in ("evolute", "envelope", "orthogonal"):
        # chained member over the previous image: the pullback fields (and,
        # from an analytic root, their exact jacobians) already live on the
        # source grid
        if fields.c is None or fields.e is None:
            return None, "pullback fields unavailable"
        t = {"evolute": 1.0, "envelope": 0.0}.get(kind, tspec.t)
        cjac, ejac = fields.pull_jacs if fields.pull_jacs else (None, None)
        return orthogonal_stage(fields.prev_ts, t, fields.c, fields.e,
                                c_jac=cjac, e_jac=ejac, tol=tol), ""
    if kind == "evolute":
        if fields.c is None:
            return None, "c undefined"
        return evolute_transform(spec, grid, c_field=fields.c, gg=gg, tol=tol), ""
    if kind == "envelope":
        if fields.e is None:
            return None, fields.notes.get("chart", "e unavailable")
        return envelope_transform(spec, grid, fields.e, gg=gg, tol=tol), ""
    if kind == "orthogonal":
        if fields.c is None or fields.e is None:
            return None, fields.notes.get("chart", "c or e unavailable")
        return orthogonal_transform(spec, grid, tspec.t, fields.c, fields.e,
                                    gg=gg, tol=tol), ""
    # parallel and shift both go through parallel_transform
    z = None
    if tspec.seed is not None:
        try:
            z = parallel_field(fields.source, grid, "normal", tspec.seed,
                               base=tspec.gauge or base, tol=tol, gg=gg)
        except (FlatnessError, SpecError) as exc:
            return None, str(exc)
    if kind == "shift":
        zero = SectionField("normal", grid, np.zeros(grid.shape + (4,)),
                            gg.immersed.copy())
        c_f = fields.c if fields.c is not None else zero
        j_f = fields.j if fields.j is not None else zero
        e_f = fields.e if fields.e is not None else zero
        k_f = fields.k if fields.k is not None else zero
        return parallel_transform(spec, grid, 0.0, 0.0, c_f, e_f, j_f, k_f,
                                  z_field=z, gg=gg, tol=tol), ""
    missing = [n for n in ("c", "e", "j", "k") if getattr(fields, n) is None]
    if missing:
        return None, "missing fields: " + ", ".join(missing)
    return parallel_transform(spec, grid, tspec.t1, tspec.t2, fields.c,
                              fields.e, fields.j, fields.k, z_field=z,
                              gg=gg, tol=tol), ""


def _needed_fields(kinds) -> set:
    need = set()
    for kind in kinds:
        if kind == "evolute":
            need |= {"c"}
        elif kind == "envelope":
            need |= {"e"}
        elif kind == "orthogonal":
            need |= {"c", "e"}
        elif kind == "parallel":
            need |= {"c", "e", "j", "k"}
    return need


def _chain_fields(prev: SuiteFields, stage: StageResult, rest, tol, base):
    """Fields on a stage image, for feeding the next pipeline stage."""
    ts = stage.ts
    spec2 = ts.as_surface()
    gg2 = stage.igg
    nxt = SuiteFields(spec2, prev.grid, make_source(spec2), gg2, "fd")
    need = _needed_fields(s.kind for s in rest)

    kind = ts.transform.kind
    t_of = {"evolute": 1.0, "envelope": 0.0}
    pullable = (kind in ("evolute", "envelope", "orthogonal")
                and prev.c is not None and prev.e is not None
                and prev.j is not None)
    if pullable:
        t = t_of.get(kind, ts.transform.t)
        k_arg = None if t == 1.0 else prev.k
        if t == 1.0 or prev.k is not None:
            ct, et = pullback_sections(ts, prev.c, prev.e, prev.j, k_arg)
            nxt.c, nxt.e = ct, et
            nxt.prev_ts = ts
            if prev.tier == "analytic" and prev.prev_ts is None:
                ders = section_jacobians(prev.spec, prev.grid, prev.gg, tol,
                                         c_field=prev.c, e_field=prev.e,
                                         j_field=prev.j, k_field=k_arg)
                dc = ders["c"]["jac"]
                de_ = ders["e"]["jac"]
                dj = ders["j"]["jac"]
                dct = (1.0 - t) * de_ - t * dj
                if k_arg is None:
                    det = t * dc
                else:
                    det = t * dc - (1.0 - t) * ders["k"]["jac"]
                nxt.pull_jacs = (dct, det)
    if nxt.c is None and ("c" in need or "j" in need):
        nxt.c = compute_c_field(gg2, prev.grid, tol)
    if nxt.e is None and "e" in need:
        try:
            chart2 = build_flat_chart(spec2, prev.grid, base=base, tol=tol,
                                      check_holonomy=False)
            nxt.e = compute_e(chart2, gg2)
        except (FlatnessError, SpecError) as exc:
            nxt.notes["chart"] = str(exc)
    if "j" in need and nxt.c is not None and nxt.c.mask.any():
        nxt.j = compute_j(gg2, nxt.c, prev.grid, tol)
    if "k" in need and nxt.e is not None:
        try:
            nxt.k = compute_k(spec2, prev.grid, nxt.e, gg2, tol, base=base)
        except (FlatnessError, SpecError, ValueError) as exc:
            nxt.notes["k"] = str(exc)
    return nxt


_TANGENT_STAGE = ("evolute", "envelope", "orthogonal")


def _stage_reports(stage: StageResult, tols: _TolTable, grid) -> list:
    i = stage.index
    kind = stage.tspec.kind
    direction = "orthogonality" if kind in _TANGENT_STAGE else "parallelism"
    names = (f"{direction}_{i}", f"image_flatness_{i}", f"image_normal_flatness_{i}")
    tiers = stage.tier
    if stage.ts is None:
        zeros = np.zeros(grid.shape)
        none = np.zeros(grid.shape, dtype=bool)
        return [_report(n, zeros, none, tols.get(n, tiers), grid) for n in names]
    ts, igg, gg_in = stage.ts, stage.igg, stage.input_gg

    frame = (gg_in.t1, gg_in.t2) if direction == "orthogonality" else (gg_in.n1, gg_in.n2)
    err = np.zeros(grid.shape)
    for vec in frame:
        dots = np.abs(np.einsum("...cm,...c->...m", ts.jac, vec))
        err = np.maximum(err, np.max(dots, axis=-1))
    checked = ts.usable & gg_in.immersed
    out = [_report(names[0], err, checked, tols.get(names[0], ts.tier), grid)]

    # curvature checks follow the hessian's tier, which can lag the jacobian's
    hess_tier = ts.meta.get("hess_tier", ts.tier)
    img_set = ts.usable & igg.immersed
    if hess_tier == "fd":
        img_set &= erode_mask(img_set, 2)
    out.append(_report(names[1], np.abs(igg.gauss_K), img_set,
                       tols.get(names[1], hess_tier), grid))
    out.append(_report(names[2], normal_degeneracy(igg), img_set,
                       tols.get(names[2], hess_tier), grid))
    return out


def _final_stage_reports(stage: StageResult, tols: _TolTable, grid, tol) -> list:
    zeros = np.zeros(grid.shape)
    none = np.zeros(grid.shape, dtype=bool)
    if stage is None or stage.ts is None:
        tier = "analytic" if stage is None else stage.tier
        return [
            _count_report("image_no_inflection", none, none,
                          tols.get("image_no_inflection", tier), grid),
            _count_report("rank_map_consistency", none, none,
                          tols.get("rank_map_consistency", tier), grid),
        ]
    ts, igg = stage.ts, stage.igg
    kinds, _ = classify_grid(igg, tol)
    img_set = ts.usable & igg.immersed
    infl = _count_report("image_no_inflection", kinds == INFLECTION, img_set,
                         tols.get("image_no_inflection", stage.tier), grid)
    checked = (~ts.masked) & (~ts.marginal)
    mismatch = (ts.rank_map == 2) != igg.immersed
    rank = _count_report("rank_map_consistency", mismatch, checked,
                         tols.get("rank_map_consistency", stage.tier), grid)
    return [infl, rank]


def _check_permutability(f: SuiteFields, ta, tb, tolerance, tol) -> CheckReport:
    checked = np.zeros(f.grid.shape, dtype=bool)
    if any(getattr(f, n) is None for n in ("c", "e", "j", "k")):
        return _report("permutability", np.zeros(f.grid.shape), checked,
                       tolerance, f.grid)
    delta, par = permutability_defect(f.spec, f.grid, ta, tb, f.c, f.e, f.j,
                                      f.k, gg=f.gg, tol=tol)
    gg = f.gg
    tang = np.maximum(
        np.abs(np.einsum("...c,...c->...", delta.values, gg.t1)),
        np.abs(np.einsum("...c,...c->...", delta.values, gg.t2)),
    )
    err = np.where(delta.mask, np.maximum(tang, par), 0.0)
    return _report("permutability", err, delta.mask, tolerance, f.grid)


# --- the suite --------------------------------------------------------------------


def run_suite_full(spec: SurfaceSpec, grid: Grid, pipeline, tol: Tolerances,
                   base=None, check_tolerances=None):
    """Run every check; returns (reports, fields, stages) for reuse."""
    pipeline = list(pipeline or [])
    fields = build_suite_fields(spec, grid, tol, base=base)
    tols = _TolTable(tol, check_tolerances)
    tier = fields.tier

    reports = [
        _check_frame(fields, tols.get("frame_orthonormality", tier)),
        _check_c_alpha(fields, tols.get("c_alpha_equals_g", tier)),
        _check_c_two_formulas(fields, tols.get("c_two_formulas_agree", tier)),
        _check_c_transport(fields, tols.get("c_transport_orthogonality", tier)),
    ]
    if fields.j is not None:
        reports.append(_check_j_formulas(fields, tols.get("j_two_formulas_agree", tier)))
    else:
        reports.append(_report("j_two_formulas_agree", np.zeros(grid.shape),
                               np.zeros(grid.shape, dtype=bool),
                               tols.get("j_two_formulas_agree", tier), grid))
    reports.append(_check_holonomy(fields, "tangent", tols.get("holonomy_tangent", tier)))
    reports.append(_check_holonomy(fields, "normal", tols.get("holonomy_normal", tier)))
    reports.append(_check_e_defining(fields, tols.get("e_defining_eq", tier)))
    reports.append(_check_k_defining(fields, tols.get("k_defining_eq", tier)))

    stages = []
    cur = fields
    for i, tspec in enumerate(pipeline, start=1):
        ts, note = _apply_stage(cur, tspec, tol, base)
        stage_tier = ts.tier if ts is not None else (cur.tier if i == 1 else "fd")
        igg = ts.image_geometry(tol) if ts is not None else None
        stage = StageResult(i, tspec, ts, igg, cur.gg, stage_tier, note, fields_in=cur)
        stages.append(stage)
        reports.extend(_stage_reports(stage, tols, grid))
        if i < len(pipeline):
            if ts is None:
                cur = SuiteFields(cur.spec, grid, cur.source, cur.gg, "fd")
            else:
                cur = _chain_fields(cur, stage, pipeline[i:], tol, base)

    last = stages[-1] if stages else None
    reports.extend(_final_stage_reports(last, tols, grid, tol))

    orth = [s for s in pipeline if s.kind == "orthogonal"]
    if len(orth) >= 2:
        reports.append(_check_permutability(
            fields, orth[0].t, orth[1].t, tols.get("permutability", tier), tol))
    return reports, fields, stages


def run_suite(spec: SurfaceSpec, grid: Grid, pipeline, tol: Tolerances = Tolerances(),
              base=None, check_tolerances=None):
    reports, _, _ = run_suite_full(spec, grid, pipeline, tol, base=base,
                                   check_tolerances=check_tolerances)
    return reports


# --- report documents -------------------------------------------------------------


def _tspec_to_dict(tspec: TransformSpec) -> dict:
    out = {"kind": tspec.kind}
    for name in ("t", "t1", "t2"):
        v = getattr(tspec, name)
        if v is not None:
            out[name] = float(v)
    if tspec.gauge is not None:
        out["gauge"] = [float(x) for x in tspec.gauge]
    if tspec.seed is not None:
        out["seed"] = [float(x) for x in tspec.seed]
    return out


def report_document(reports, spec: SurfaceSpec, grid: Grid, pipeline,
                    tol: Tolerances, notes=None) -> dict:
    doc = {
        "header": {
            "surface": surface_to_json(spec),
            "grid": {"nu": int(grid.nu), "nv": int(grid.nv),
                     "domain": [float(grid.us[0]), float(grid.us[-1]),
                                float(grid.vs[0]), float(grid.vs[-1])]},
            "pipeline": [_tspec_to_dict(t) for t in (pipeline or [])],
            "tolerances": {k: float(v) for k, v in asdict(tol).items()},
            "version": VERSION,
        },
        "checks": [r.to_dict() for r in reports],
    }
    if notes:
        doc["header"]["notes"] = dict(notes)
    return doc


def _json_fragments(obj, out: list) -> None:
    if isinstance(obj, dict):
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                out.append(", ")
            out.append(f'"{k}": ')
            _json_fragments(v, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(", ")
            _json_fragments(v, out)
        out.append("]")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif obj is None:
        out.append("null")
    elif isinstance(obj, str):
        escaped = obj.replace("\\", "\\\\").replace('"', '\\"')
        out.append(f'"{escaped}"')
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    else:
        text = format(float(obj), ".17g")
        if text.lstrip("-").isdigit():
            text += ".0"
        out.append(text)


def dumps_document(doc) -> str:
    """Deterministic JSON with floats at 17 significant digits."""
    parts: list = []
    _json_fragments(doc, parts)
    return "".join(parts) + "\n"
