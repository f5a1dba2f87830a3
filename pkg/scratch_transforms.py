"""Measurement harness for the transform layer, run before pinning tests."""

import time

import numpy as np

from surf4.geometry import Tolerances, normal_degeneracy
from surf4.sections import (
    SectionField, build_flat_chart, compute_c_field, compute_e, compute_j,
    compute_k, make_source,
)
from surf4.surfaces import Grid, PlaneCurve, product_surface
from surf4.transforms import (
    envelope_transform, evolute_transform, orthogonal_transform,
    parallel_transform, permutability_defect, pullback_sections,
)

TOL = Tolerances()

ELL = product_surface(
    PlaneCurve("ellipse", a=2.0, b=1.0), PlaneCurve("ellipse", a=3.0, b=1.0)
)
CLIFF = product_surface(
    PlaneCurve("circle", radius=1.0, arc_length=True),
    PlaneCurve("circle", radius=1.0, arc_length=True),
)
ELLC = product_surface(
    PlaneCurve("ellipse", a=2.0, b=1.0), PlaneCurve("circle", radius=1.0)
)


def build_fields(spec, n, base=(0.0, 0.0), with_k=True):
    t0 = time.time()
    grid = Grid.regular(spec.domain, n, n)
    source = make_source(spec)
    gg = source.node_geometry(grid, TOL)
    chart = build_flat_chart(spec, grid, base=base, tol=TOL, gg=gg,
                             check_holonomy=False)
    e = compute_e(chart, gg)
    c = compute_c_field(gg, grid, TOL)
    c_jets = None
    if spec.analytic:
        from surf4.sections import c_jets_on_grid
        c_jets, _ = c_jets_on_grid(spec, grid, gg, TOL)
    j = compute_j(gg, c, grid, TOL, c_jets=c_jets)
    k = compute_k(spec, grid, e, gg, TOL) if with_k else None
    print(f"  fields built in {time.time() - t0:.2f}s")
    return grid, gg, chart, c, e, j, k


def ellipse_evolute(a, b, t):
    return np.stack(
        [(a * a - b * b) / a * np.cos(t) ** 3,
         -(a * a - b * b) / b * np.sin(t) ** 3], axis=-1
    )


def masked_max(arr, mask):
    return float(np.max(np.where(mask, arr, 0.0)))


def report_orthogonality(ts, gg, label):
    du = np.einsum("...cm,...c->...m", ts.jac, gg.t1)
    dv = np.einsum("...cm,...c->...m", ts.jac, gg.t2)
    d = np.maximum(np.abs(du).max(axis=-1), np.abs(dv).max(axis=-1))
    print(f"  {label}: orthogonality defect {masked_max(d, ts.usable):.3e}"
          f"  usable {int(ts.usable.sum())}/{ts.usable.size}")


def report_parallelism(ts, gg, label):
    n1 = np.einsum("...cm,...c->...m", ts.jac, gg.n1)
    n2 = np.einsum("...cm,...c->...m", ts.jac, gg.n2)
    d = np.maximum(np.abs(n1).max(axis=-1), np.abs(n2).max(axis=-1))
    print(f"  {label}: parallelism defect {masked_max(d, ts.usable):.3e}"
          f"  usable {int(ts.usable.sum())}/{ts.usable.size}")


def image_quality(ts, label, frac_tol=1e-4):
    igg = ts.image_geometry(TOL)
    use = ts.usable & igg.immersed
    gk = np.abs(igg.gauss_K)
    nd = normal_degeneracy(igg)
    n = use.sum()
    print(f"  {label}: |K| max {masked_max(gk, use):.3e}"
          f"  |normal K| max {masked_max(nd, use):.3e}"
          f"  on {int(n)} nodes"
          f"  frac<{frac_tol:g}: K {float((gk[use] < frac_tol).mean()):.4f}"
          f" ndeg {float((nd[use] < frac_tol).mean()):.4f}")


print("== ellipse(2,1) x ellipse(3,1), 32^2, base (0,0) ==")
grid, gg, chart, c, e, j, k = build_fields(ELL, 32)
U, V = grid.meshes()

ev = evolute_transform(ELL, grid, c_field=c, gg=gg, tol=TOL)
closed = np.concatenate(
    [ellipse_evolute(2.0, 1.0, U)[..., None] * 0  # placeholder shape
     ], axis=-1) if False else None
ev1 = ellipse_evolute(2.0, 1.0, U)
ev2 = ellipse_evolute(3.0, 1.0, V)
closed = np.stack([ev1[..., 0], ev1[..., 1], ev2[..., 0], ev2[..., 1]], axis=-1)
print(f"  evolute vs per-curve closed form: {masked_max(np.linalg.norm(ev.images - closed, axis=-1), ~ev.masked):.3e}")
i0 = 0
print(f"  evolute at (0,0): {ev.images[0, 0]} want (1.5, 0, {8/3}, 0)")
print(f"  rank counts: {np.bincount(ev.rank_map.ravel(), minlength=3)} marginal {int(ev.marginal.sum())}")
# where does rank drop? expect near u or v in {0, pi/2, pi, 3pi/2}
low = np.argwhere((ev.rank_map < 2) & ~ev.masked)
if len(low):
    us = np.unique(np.round(U[low[:, 0], low[:, 1]], 3))
    vs = np.unique(np.round(V[low[:, 0], low[:, 1]], 3))
    print(f"  rank<2 at u in {us[:8]}... v in {vs[:8]}...")
report_orthogonality(ev, gg, "evolute")
image_quality(ev, "evolute image")

env = envelope_transform(ELL, grid, e, gg=gg, tol=TOL)
print(f"  envelope images == x - e: {np.max(np.abs(env.images - (gg.point - e.values))):.3e}")
print(f"  envelope rank counts: {np.bincount(env.rank_map.ravel(), minlength=3)} marginal {int(env.marginal.sum())}")
report_orthogonality(env, gg, "envelope")
image_quality(env, "envelope image")

for t in (0.25, 0.5):
    ot = orthogonal_transform(ELL, grid, t, c, e, gg=gg, tol=TOL)
    report_orthogonality(ot, gg, f"orthogonal t={t}")
    image_quality(ot, f"orthogonal t={t} image")

o1 = orthogonal_transform(ELL, grid, 1.0, c, e, gg=gg, tol=TOL)
o0 = orthogonal_transform(ELL, grid, 0.0, c, e, gg=gg, tol=TOL)
print(f"  t=1 bitwise evolute: images {np.array_equal(o1.images, ev.images)}"
      f" jac {np.array_equal(o1.jac, ev.jac)} rank {np.array_equal(o1.rank_map, ev.rank_map)}")
print(f"  t=0 bitwise envelope: images {np.array_equal(o0.images, env.images)}"
      f" jac {np.array_equal(o0.jac, env.jac)}")

print("== roundtrip: envelope of the evolute ==")
ev_surface = ev.as_surface()
e_back = SectionField("tangent", grid, c.values.copy(), ~ev.masked & c.mask)
back = envelope_transform(ev_surface, grid, e_back, tol=TOL)
gap = np.linalg.norm(back.images - gg.point, axis=-1)
print(f"  roundtrip max gap on usable: {masked_max(gap, ~back.masked):.3e}")

print("== pullbacks ==")
oh = orthogonal_transform(ELL, grid, 0.5, c, e, gg=gg, tol=TOL)
ct, et = pullback_sections(oh, c, e, j, k)
# recompute c on the image by running the pipeline on the sampled image
img_src = make_source(oh.as_surface())
igg = img_src.node_geometry(grid, TOL)
c_img = compute_c_field(igg, grid, TOL)
use = ct.mask & c_img.mask & igg.immersed
print(f"  recomputed image c vs formula: {masked_max(np.linalg.norm(c_img.values - ct.values, axis=-1), use):.3e} on {int(use.sum())}")
ct0, et0 = pullback_sections(orthogonal_transform(ELL, grid, 0.0, c, e, gg=gg, tol=TOL), c, e, j, k)
print(f"  t=0: c~ == e: {np.array_equal(ct0.values, e.values)}  e~ == -k: {np.array_equal(et0.values, -k.values)}")
ct1, et1 = pullback_sections(o1, c, e, j, None)
print(f"  t=1: c~ == -j: {np.array_equal(ct1.values, -j.values)}  e~ == c: {np.array_equal(et1.values, c.values)}")

print("== parallel ==")
ident = parallel_transform(ELL, grid, 0.0, 0.0, c, e, j, k, gg=gg, tol=TOL)
print(f"  t1=t2=0 identity bitwise: {np.array_equal(ident.images, gg.point)} jac {np.array_equal(ident.jac, gg.jac)}")
par = parallel_transform(ELL, grid, 0.25, 0.25, c, e, j, k, gg=gg, tol=TOL)
report_parallelism(par, gg, "parallel (1/4, 1/4)")
image_quality(par, "parallel image")

print("== permutability ==")
d_eq, pd_eq = permutability_defect(ELL, grid, 0.3, 0.3, c, e, j, k, gg=gg, tol=TOL)
print(f"  t1=t2=0.3: max |delta| {masked_max(np.linalg.norm(d_eq.values, axis=-1), d_eq.mask):.3e} (want exact 0)")
t0 = time.time()
delta, pdef = permutability_defect(ELL, grid, 0.3, 0.7, c, e, j, k, gg=gg, tol=TOL)
print(f"  (0.3, 0.7) in {time.time()-t0:.2f}s: normality {delta.meta['normality']:.3e}"
      f" parallel_defect {pdef:.3e}")
print(f"  routes vs closed: {delta.meta['route_vs_closed']}")
d2, p2 = permutability_defect(ELL, grid, 0.0, 1.0, c, e, j, k, gg=gg, tol=TOL)
print(f"  endpoints (0,1): normality {d2.meta['normality']:.3e} parallel {p2:.3e}")

print("== Clifford torus ==")
grid_c, gg_c, chart_c, c_c, e_c, j_c, k_c = build_fields(CLIFF, 32)
ev_c = evolute_transform(CLIFF, grid_c, c_field=c_c, gg=gg_c, tol=TOL)
print(f"  evolute image max |pt|: {masked_max(np.linalg.norm(ev_c.images, axis=-1), ~ev_c.masked):.3e}")
print(f"  rank counts: {np.bincount(ev_c.rank_map.ravel(), minlength=3)}")
env_c = envelope_transform(CLIFF, grid_c, e_c, gg=gg_c, tol=TOL)
rk = env_c.rank_map
offaxis = (np.abs(np.sin(U)) > 0.3) & (np.abs(np.sin(V)) > 0.3)
print(f"  envelope rank 2 off axes: {int((rk[offaxis & ~env_c.masked] == 2).sum())}/{int((offaxis & ~env_c.masked).sum())}")
print(f"  envelope rank counts: {np.bincount(rk.ravel(), minlength=3)} marginal {int(env_c.marginal.sum())}")
pc = parallel_transform(CLIFF, grid_c, 0.0, 1.0, c_c, e_c, j_c, k_c, gg=gg_c, tol=TOL)
print(f"  parallel (0,1) image max |pt| {masked_max(np.linalg.norm(pc.images, axis=-1), ~pc.masked):.3e}"
      f" rank counts {np.bincount(pc.rank_map.ravel(), minlength=3)}")
print(f"  max |j| on Clifford: {masked_max(np.linalg.norm(j_c.values, axis=-1), j_c.mask):.3e}")

print("== ellipse x circle: rank 1 evolute ==")
grid_1 = Grid.regular(ELLC.domain, 32, 32)
src_1 = make_source(ELLC)
gg_1 = src_1.node_geometry(grid_1, TOL)
ev_1 = evolute_transform(ELLC, grid_1, gg=gg_1, tol=TOL)
print(f"  rank counts: {np.bincount(ev_1.rank_map.ravel(), minlength=3)} marginal {int(ev_1.marginal.sum())}")

print("== sampled (fd) path: ellipse product through point samples ==")
from surf4.surfaces import surface_points, sampled_surface
pts = surface_points(ELL, U, V)
ELL_S = sampled_surface(grid.us, grid.vs, pts)
t0 = time.time()
grid_s, gg_s, chart_s, c_s, e_s, j_s, k_s = build_fields(ELL_S, 32, base=(np.pi, np.pi), with_k=False)
oh_s = orthogonal_transform(ELL_S, grid_s, 0.5, c_s, e_s, gg=gg_s, tol=TOL)
report_orthogonality(oh_s, gg_s, "sampled orthogonal t=0.5")
image_quality(oh_s, "sampled orthogonal t=0.5 image")
print(f"  sampled path in {time.time()-t0:.2f}s")
