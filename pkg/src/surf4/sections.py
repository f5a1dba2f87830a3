"""Canonical fields along a surface: the normal section c with c.alpha = g,
the tangent field e whose tangential derivative is the identity, j = half the
tangential gradient of c.c, and the normal section k that pairs with e the
way j pairs with c, built through the envelope surface.

Transport runs a classical 4th-order one-step integrator along grid edges in
chart components (tangent vectors) or ambient components (normal vectors);
flat coordinates integrate in the same pass so they share the integrator's
accuracy.  Connection data comes from a source object: analytic surfaces
evaluate jets on demand, sampled ones interpolate stride-difference node
fields bicubically.  Construction paths are staircases (base u-line, then
v-lines); flatness makes the result path independent up to the reported
holonomy defect.

Node fields never extrapolate: quadrature-free constructions (c, j) are pure
per-node geometry, and the envelope pullback k needs the envelope's own e
only at image nodes, which sit on the same (u, v) lattice as the source
nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .geometry import (
    INFLECTION,
    UMBILIC,
    GridGeometry,
    Tolerances,
    classify_grid,
    frame_pipeline,
    geometry_from_jets,
    grid_geometry,
    jacobian_rank,
    sanitize_jets,
)
from .jets import Jet2, coeff_index, jets_where
from .surfaces import Grid, SpecError, SurfaceSpec, eval_surface, grid_jets

__all__ = [
    "SectionField",
    "FlatChart",
    "FlatnessError",
    "PathDependenceError",
    "EnvelopeRankError",
    "CDefinitionError",
    "AnalyticSource",
    "GridSource",
    "EnvelopeSource",
    "make_source",
    "connection_from_jac_hess",
    "transport_edge",
    "staircase_transport",
    "cell_holonomy",
    "build_flat_chart",
    "compute_e",
    "chart_field_derivatives",
    "parallel_field",
    "compute_c",
    "c_nearest_point",
    "compute_c_field",
    "c_jets_on_grid",
    "compute_j",
    "j_both_formulas",
    "compute_k",
    "envelope_jets",
    "field_jets",
    "erode_mask",
    "largest_true_rectangle",
    "refine_grid",
    "snap_to_node",
    "complete_jets_pde",
    "connection_jets",
    "e_completion_jets",
    "normal_completion_jets",
]


class FlatnessError(ValueError):
    pass


class PathDependenceError(ValueError):
    pass


class EnvelopeRankError(ValueError):
    pass


class CDefinitionError(ValueError):
    pass


# --- section containers -----------------------------------------------------

@dataclass(eq=False)
class SectionField:
    """Grid-sampled vector field along a surface (tangent or normal bundle)."""

    bundle: str  # tangent | normal
    grid: Grid
    values: np.ndarray  # (nu, nv, 4)
    mask: np.ndarray  # (nu, nv) bool: nodes where the construction is defined
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.bundle not in ("tangent", "normal"):
            raise ValueError("bundle must be 'tangent' or 'normal'")
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)

    @cached_property
    def _splines(self):
        filled = np.where(np.isfinite(self.values), self.values, 0.0)
        return tuple(
            RectBivariateSpline(self.grid.us, self.grid.vs, filled[:, :, i], kx=3, ky=3)
            for i in range(4)
        )

    def at(self, u, v) -> np.ndarray:
        out = [s(u, v, grid=False) for s in self._splines]
        return np.stack(np.broadcast_arrays(*out), axis=-1)

    def coverage(self) -> float:
        return float(np.count_nonzero(self.mask)) / self.mask.size


@dataclass(eq=False)
class FlatChart:
    """Parallel tangent frame plus integrated flat coordinates."""

    grid: Grid
    base_index: tuple[int, int]
    base_point: np.ndarray  # (2,) the snapped node
    frame_comps: np.ndarray  # (nu, nv, 2, 2): E_i = comps[..., i, a] d/d(u,v)_a
    frame_ambient: np.ndarray  # (nu, nv, 2, 4)
    flat_coords: np.ndarray  # (nu, nv, 2)
    holonomy_defect: float
    cell_defects: np.ndarray  # (nu-1, nv-1)
    tier: str  # analytic | fd


# --- connection sources -----------------------------------------------------

class AnalyticSource:
    """Jet-backed jacobian/hessian data for product or expression surfaces."""

    tier = "analytic"

    def __init__(self, spec: SurfaceSpec):
        if not spec.analytic:
            raise ValueError("AnalyticSource needs a product or expression surface")
        self.spec = spec

    def point(self, u, v):
        jets = eval_surface(self.spec, (u, v), 0)
        return np.stack([j.value for j in jets], axis=-1)

    def jac_hess(self, u, v):
        jets = eval_surface(self.spec, (u, v), 2)
        return _jets_to_jac_hess(jets)

    def node_geometry(self, grid: Grid, tol: Tolerances) -> GridGeometry:
        return grid_geometry(self.spec, grid, tol)


def _jets_to_jac_hess(jets):
    jac = np.stack(
        [np.stack([j.du().value for j in jets], axis=-1),
         np.stack([j.dv().value for j in jets], axis=-1)],
        axis=-1,
    )
    hess = np.stack(
        [np.stack([2.0 * j.coeff(2, 0) for j in jets], axis=-1),
         np.stack([j.coeff(1, 1) for j in jets], axis=-1),
         np.stack([2.0 * j.coeff(0, 2) for j in jets], axis=-1)],
        axis=-1,
    )
    return jac, hess


class GridSource:
    """Quintic interpolant of lattice samples; derivatives come from the fit.

    Jacobian and hessian fields are partial derivatives of one point spline
    per component, so the interpolated world is self-consistent: transported
    frames, connection coefficients and node geometry all describe the same
    C^3 surface, and defining-equation residuals measure transport fidelity
    rather than disagreement between independent fits.  A margin ring (no
    trustworthy derivatives near the open boundary) stays masked in node
    geometry.

    Callers holding the derivative fields in closed form (the envelope map,
    whose jacobian follows from the defining equation of e) may pass jac and
    hess directly; those exact node fields are then fit separately and the
    margin mask is skipped.
    """

    tier = "fd"

    def __init__(self, us, vs, points, levels: int = 3, jac=None, hess=None):
        self.grid = Grid(us, vs)
        self.points = np.asarray(points, dtype=float)
        if self.points.shape != (self.grid.nu, self.grid.nv, 4):
            raise ValueError("points must be shaped (nu, nv, 4)")
        self.levels = levels
        if (jac is None) != (hess is None):
            raise ValueError("jac and hess must be supplied together")
        if jac is not None:
            self._node_jac = np.asarray(jac, dtype=float)
            self._node_hess = np.asarray(hess, dtype=float)
            self.stencil_ok = np.ones(self.grid.shape, dtype=bool)
        else:
            self._node_jac = None
            self._node_hess = None
            m = 2 ** (levels - 1)
            if self.grid.nu <= 2 * m or self.grid.nv <= 2 * m:
                raise SpecError("grid too small for stride differences")
            ok = np.zeros(self.grid.shape, dtype=bool)
            ok[m:-m, m:-m] = True
            self.stencil_ok = ok

    @cached_property
    def _field_splines(self):
        us, vs = self.grid.us, self.grid.vs
        deg = min(5, len(us) - 1, len(vs) - 1)

        def fit(f):
            return RectBivariateSpline(us, vs, f, kx=deg, ky=deg)

        pt_sp = [fit(self.points[:, :, c]) for c in range(4)]
        if self._node_jac is None:
            jac_sp = [[s.partial_derivative(1, 0), s.partial_derivative(0, 1)]
                      for s in pt_sp]
            hess_sp = [[s.partial_derivative(2, 0), s.partial_derivative(1, 1),
                        s.partial_derivative(0, 2)] for s in pt_sp]
        else:
            jac, hess = self._node_jac, self._node_hess
            jac_sp = [[fit(jac[:, :, c, a]) for a in range(2)] for c in range(4)]
            hess_sp = [[fit(hess[:, :, c, k]) for k in range(3)] for c in range(4)]
        return pt_sp, jac_sp, hess_sp

    def point(self, u, v):
        pt_sp, _, _ = self._field_splines
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        return np.stack([s(u, v, grid=False) for s in pt_sp], axis=-1)

    def jac_hess(self, u, v):
        _, jac_sp, hess_sp = self._field_splines
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        jac = np.stack(
            [np.stack([jac_sp[c][a](u, v, grid=False) for c in range(4)], axis=-1)
             for a in range(2)],
            axis=-1,
        )
        hess = np.stack(
            [np.stack([hess_sp[c][k](u, v, grid=False) for c in range(4)], axis=-1)
             for k in range(3)],
            axis=-1,
        )
        return jac, hess

    def node_geometry(self, grid: Grid, tol: Tolerances) -> GridGeometry:
        U, V = grid.meshes()
        gg = _geometry_from_fields(self.point(U, V), *self.jac_hess(U, V), tol)
        iu = np.abs(self.grid.us[:, None] - grid.us[None, :]).argmin(axis=0)
        iv = np.abs(self.grid.vs[:, None] - grid.vs[None, :]).argmin(axis=0)
        gg.immersed &= self.stencil_ok[np.ix_(iu, iv)]
        return gg


def _geometry_from_fields(point, jac, hess, tol: Tolerances) -> GridGeometry:
    """Node geometry from sampled value, jacobian and hessian fields."""
    jets = []
    for c in range(4):
        coeffs = np.zeros(point.shape[:-1] + (6,))
        coeffs[..., coeff_index(0, 0)] = point[..., c]
        coeffs[..., coeff_index(1, 0)] = jac[..., c, 0]
        coeffs[..., coeff_index(0, 1)] = jac[..., c, 1]
        coeffs[..., coeff_index(2, 0)] = 0.5 * hess[..., c, 0]
        coeffs[..., coeff_index(1, 1)] = hess[..., c, 1]
        coeffs[..., coeff_index(0, 2)] = 0.5 * hess[..., c, 2]
        jets.append(Jet2(2, coeffs))
    return geometry_from_jets(jets, tol)


def make_source(spec: SurfaceSpec, levels: int = 3):
    if spec.analytic:
        return AnalyticSource(spec)
    d = spec.samples
    return GridSource(d.us, d.vs, d.points, levels=levels)


# symmetric-pair index tables: entry [n, a] is the pair (n, a), entry [k, n]
# extends pair k by direction n
_PAIR2 = np.array([[0, 1], [1, 2]])
_PAIR3 = np.array([[0, 1], [1, 2], [2, 3]])


class EnvelopeSource:
    """The map x - e evaluated exactly on demand, no interpolation.

    e's defining equation gives the map's jacobian as -alpha(., e) and, after
    one more derivative, its hessian in terms of the surface's order-3 jet
    data and e itself.  Off-node queries recover e by continuing the chart
    state from the nearest lattice node (two short axis legs), so every
    ingredient carries integrator accuracy.  That matters because transported
    frames on this image surface feed on the assembled connection: spline fits
    of the node fields leak interpolation error straight into the transport,
    while on-demand assembly leaves the one-step integrator as the only error
    source.

    Only analytic base surfaces can serve order-3 jets; sampled ones go
    through the precomputed-field GridSource route instead.
    """

    tier = "analytic"

    def __init__(self, msource: AnalyticSource, chart: FlatChart, nsub: int = 1):
        self.msource = msource
        self.spec = msource.spec
        self.chart = chart
        self.nsub = nsub

    def _state_at(self, u, v):
        g = self.chart.grid
        i = np.clip(np.rint((u - g.us[0]) / g.du), 0, g.nu - 1).astype(int)
        j = np.clip(np.rint((v - g.vs[0]) / g.dv), 0, g.nv - 1).astype(int)
        tang = self.chart.frame_comps[i, j]
        coords = self.chart.flat_coords[i, j]
        off_u = u - g.us[i]
        off_v = v - g.vs[j]
        if np.any(off_u):
            tang, _, coords, _ = transport_edge(
                self.msource, g.us[i], g.vs[j], 0, off_u, self.nsub,
                tang=tang, coords=coords)
        if np.any(off_v):
            tang, _, coords, _ = transport_edge(
                self.msource, u, g.vs[j], 1, off_v, self.nsub,
                tang=tang, coords=coords)
        return tang, coords

    def _e_comps(self, u, v):
        tang, coords = self._state_at(u, v)
        return np.einsum("...i,...ib->...b", coords, tang)

    def point(self, u, v):
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        w = self._e_comps(u, v)
        jets = eval_surface(self.spec, (u, v), 1)
        x = np.stack([jt.value for jt in jets], axis=-1)
        jac = np.stack(
            [np.stack([jt.du().value for jt in jets], axis=-1),
             np.stack([jt.dv().value for jt in jets], axis=-1)],
            axis=-1,
        )
        return x - np.einsum("...b,...cb->...c", w, jac)

    def _assemble(self, u, v, w):
        """Envelope jacobian and hessian at (u, v) given e's components there.

        Also returns the base surface's Christoffel and metric values, so the
        coupled transport can advance the base chart state from the same jet
        evaluation.  Assembled with flat array arithmetic rather than jet
        algebra: this sits inside every integrator stage and the per-op
        overhead of small jet objects would dominate the build.
        """
        x_jets = eval_surface(self.spec, (u, v), 3)
        X1 = np.stack([np.stack([j.coeff(1, 0), j.coeff(0, 1)], axis=-1)
                       for j in x_jets], axis=-2)
        X2 = np.stack([np.stack([2.0 * j.coeff(2, 0), j.coeff(1, 1),
                                 2.0 * j.coeff(0, 2)], axis=-1)
                       for j in x_jets], axis=-2)
        X3 = np.stack([np.stack([6.0 * j.coeff(3, 0), 2.0 * j.coeff(2, 1),
                                 2.0 * j.coeff(1, 2), 6.0 * j.coeff(0, 3)],
                                axis=-1)
                       for j in x_jets], axis=-2)
        # pair-index gathers: X2p[..., c, n, a] = d_n d_a x^c and
        # X3p[..., c, k, n] = d_n of second-partial pair k
        X2p = X2[..., _PAIR2]
        X3p = X3[..., _PAIR3]
        g_val = np.einsum("...ca,...cb->...ab", X1, X1)
        dg = (np.einsum("...cna,...cb->...nab", X2p, X1)
              + np.einsum("...ca,...cnb->...nab", X1, X2p))
        det = g_val[..., 0, 0] * g_val[..., 1, 1] - g_val[..., 0, 1] ** 2
        ginv = np.empty_like(g_val)
        ginv[..., 0, 0] = g_val[..., 1, 1] / det
        ginv[..., 1, 1] = g_val[..., 0, 0] / det
        ginv[..., 0, 1] = ginv[..., 1, 0] = -g_val[..., 0, 1] / det
        dginv = -np.einsum("...ae,...nef,...fb->...nab", ginv, dg, ginv)
        P = np.einsum("...ca,...ck->...ak", X1, X2)
        dP = (np.einsum("...cna,...ck->...nak", X2p, X2)
              + np.einsum("...ca,...ckn->...nak", X1, X3p))
        gam_val = np.einsum("...ab,...bk->...ak", ginv, P)
        dgam = (np.einsum("...nab,...bk->...nak", dginv, P)
                + np.einsum("...ab,...nbk->...nak", ginv, dP))
        a_val = X2 - np.einsum("...ak,...ca->...ck", gam_val, X1)
        dalpha = (np.moveaxis(X3p, -1, -3)
                  - np.einsum("...nak,...ca->...nck", dgam, X1)
                  - np.einsum("...ak,...cna->...nck", gam_val, X2p))
        a_du = dalpha[..., 0, :, :]
        a_dv = dalpha[..., 1, :, :]
        jacW = np.empty(u.shape + (4, 2))
        for m in (0, 1):
            jacW[..., m] = -np.einsum("...cb,...b->...c", a_val[..., m:m + 2], w)
        # d_n w^b = delta_nb - Gamma^b_{na} w^a from the defining equation
        dw = np.empty(u.shape + (2, 2))
        for n in (0, 1):
            for b in (0, 1):
                dw[..., n, b] = (1.0 if n == b else 0.0) - np.einsum(
                    "...a,...a->...", gam_val[..., b, n:n + 2], w)
        d_a = (a_du, a_dv)
        hessW = np.empty(u.shape + (4, 3))
        for m, n, kk in ((0, 0, 0), (0, 1, 1), (1, 1, 2)):
            t = (np.einsum("...cb,...b->...c", a_val[..., m:m + 2], dw[..., n, :])
                 + np.einsum("...cb,...b->...c", d_a[n][..., m:m + 2], w))
            if m != n:
                t2 = (np.einsum("...cb,...b->...c", a_val[..., n:n + 2], dw[..., m, :])
                      + np.einsum("...cb,...b->...c", d_a[m][..., n:n + 2], w))
                t = 0.5 * (t + t2)
            hessW[..., kk] = -t
        return jacW, hessW, gam_val, g_val

    def jac_hess(self, u, v):
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        w = self._e_comps(u, v)
        jacW, hessW, _, _ = self._assemble(u, v, w)
        return jacW, hessW

    def node_geometry(self, grid: Grid, tol: Tolerances) -> GridGeometry:
        U, V = grid.meshes()
        return _geometry_from_fields(self.point(U, V), *self.jac_hess(U, V), tol)

    # Coupled transport: the base chart state rides in the same one-step
    # integrator as the image state, so each stage costs one jet evaluation
    # instead of a fresh nearest-node continuation per query.

    def _coupled_rhs(self, u, v, axis, state):
        mtang, mcoords, vtang, vcoords = state
        w = np.einsum("...i,...ib->...b", mcoords, mtang)
        jacW, hessW, gam_val, g_val = self._assemble(u, v, w)
        d_mtang = -np.einsum("...ab,...kb->...ka",
                             gam_val[..., :, axis:axis + 2], mtang)
        d_mcoords = np.einsum("...ib,...b->...i", mtang, g_val[..., :, axis])
        gt, _, gamt, _ = connection_from_jac_hess(jacW, hessW)
        d_vtang = -np.einsum("...ab,...kb->...ka",
                             gamt[..., :, axis:axis + 2], vtang)
        d_vcoords = np.einsum("...ib,...b->...i",
                              vtang[..., :2, :], gt[..., :, axis])
        return [d_mtang, d_mcoords, d_vtang, d_vcoords]

    def _coupled_edge(self, u0, v0, axis, h, nsub, state):
        u0 = np.asarray(u0, dtype=float)
        v0 = np.asarray(v0, dtype=float)
        step = h / nsub
        s = 0.0
        for _ in range(nsub):
            k = []
            for ds, prev in ((0.0, 0), (0.5, 1), (0.5, 2), (1.0, 3)):
                off = s + ds * step
                uu = u0 + off if axis == 0 else u0
                vv = v0 + off if axis == 1 else v0
                if prev == 0:
                    trial = state
                else:
                    w = 0.5 if prev in (1, 2) else 1.0
                    trial = [y + _smul(w * step, dy)
                             for y, dy in zip(state, k[prev - 1])]
                k.append(self._coupled_rhs(uu, vv, axis, trial))
            state = [y + _smul(step / 6.0, k[0][n] + 2 * k[1][n] + 2 * k[2][n]
                               + k[3][n])
                     for n, y in enumerate(state)]
            s = s + step
        return state

    def _base_state(self, u, v):
        g = self.chart.grid
        i = np.clip(np.rint((u - g.us[0]) / g.du), 0, g.nu - 1).astype(int)
        j = np.clip(np.rint((v - g.vs[0]) / g.dv), 0, g.nv - 1).astype(int)
        if np.any(u - g.us[i]) or np.any(v - g.vs[j]):
            return self._state_at(u, v)
        return self.chart.frame_comps[i, j], self.chart.flat_coords[i, j]

    def staircase(self, grid: Grid, base_index, tang0, nsub):
        nu, nv = grid.nu, grid.nv
        ib, jb = base_index
        mtang0, mcoords0 = self._base_state(
            np.asarray(grid.us[ib]), np.asarray(grid.vs[jb]))
        fields = [np.zeros((nu, nv) + np.shape(s))
                  for s in (mtang0, mcoords0, tang0, np.zeros(2))]
        for a, s in zip(fields, (mtang0, mcoords0, tang0, np.zeros(2))):
            a[ib, jb] = s

        def state(index):
            return [a[index] for a in fields]

        def put(index, st):
            for a, s in zip(fields, st):
                a[index] = s

        vb = float(grid.vs[jb])
        for i in range(ib, nu - 1):
            put((i + 1, jb), self._coupled_edge(
                float(grid.us[i]), vb, 0, grid.du, nsub, state((i, jb))))
        for i in range(ib, 0, -1):
            put((i - 1, jb), self._coupled_edge(
                float(grid.us[i]), vb, 0, -grid.du, nsub, state((i, jb))))
        for j in range(jb, nv - 1):
            put((slice(None), j + 1), self._coupled_edge(
                grid.us, float(grid.vs[j]), 1, grid.dv, nsub,
                state((slice(None), j))))
        for j in range(jb, 0, -1):
            put((slice(None), j - 1), self._coupled_edge(
                grid.us, float(grid.vs[j]), 1, -grid.dv, nsub,
                state((slice(None), j))))
        return fields[2], fields[3]

    def shifted_w(self, u, v, comps, coords, axis, h, nsub):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        mtang, mcoords = self._base_state(u, v)
        st = self._coupled_edge(u, v, axis, h, nsub,
                                [mtang, mcoords, comps, coords])
        us = u + h if axis == 0 else u
        vs = v + h if axis == 1 else v
        w_img = np.einsum("...i,...ib->...b", st[3], st[2])
        w_base = np.einsum("...i,...ib->...b", st[1], st[0])
        jacW, _, _, _ = self._assemble(us, vs, w_base)
        return np.einsum("...b,...cb->...c", w_img, jacW)


def connection_from_jac_hess(jac, hess):
    """Metric, inverse, Christoffel symbols and ambient second form.

    Returns (g, ginv, gam, alpha) with gam[..., a, k] = Gamma^a_{mb} for the
    symmetric pair index k = m + b (uu=0, uv=1, vv=2) and alpha[..., :, k]
    the normal-valued second derivative for the same pairs.
    """
    g = np.einsum("...ca,...cb->...ab", jac, jac)
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
    ginv = np.empty_like(g)
    ginv[..., 0, 0] = g[..., 1, 1]
    ginv[..., 1, 1] = g[..., 0, 0]
    ginv[..., 0, 1] = -g[..., 0, 1]
    ginv[..., 1, 0] = -g[..., 1, 0]
    ginv = ginv / det[..., None, None]
    proj = np.einsum("...ca,...ck->...ak", jac, hess)  # x_a . x_k
    gam = np.einsum("...ad,...dk->...ak", ginv, proj)
    alpha = hess - np.einsum("...ca,...ak->...ck", jac, gam)
    return g, ginv, gam, alpha


# --- transport ---------------------------------------------------------------

def _transport_rhs(source, u, v, axis, tang, norm, coords, kcoords=None):
    jac, hess = source.jac_hess(u, v)
    g, ginv, gam, alpha = connection_from_jac_hess(jac, hess)
    out_t = out_n = out_c = out_k = None
    if tang is not None:
        # dy^a/ds = -Gamma^a_{axis, b} y^b; pair indices (axis+0, axis+1)
        gam_m = gam[..., :, axis : axis + 2]
        out_t = -np.einsum("...ab,...kb->...ka", gam_m, tang)
    if norm is not None:
        al_m = alpha[..., :, axis : axis + 2]  # (..., 4, 2): alpha(axis, b)
        dots = np.einsum("...lc,...cb->...lb", norm, al_m)
        coef = -np.einsum("...ab,...lb->...la", ginv, dots)
        out_n = np.einsum("...ca,...la->...lc", jac, coef)
    if coords is not None:
        # d(flat coords)/ds = E_i . x_axis; rows 0 and 1 of tang are E1, E2
        out_c = np.einsum("...ib,...b->...i", tang[..., :2, :], g[..., :, axis])
    if kcoords is not None:
        # sourced normal coordinates: d k_l/ds = xi_l . alpha(x_axis, e) with
        # e = sum_i c_i E_i; needs tangent frame, coords and normal frame alive
        w = np.einsum("...i,...ib->...b", coords, tang[..., :2, :])
        a_e = np.einsum("...cb,...b->...c", alpha[..., :, axis : axis + 2], w)
        out_k = np.einsum("...lc,...c->...l", norm, a_e)
    return out_t, out_n, out_c, out_k


def _smul(step, arr):
    """Multiply a state array by a scalar or per-lane step."""
    if np.ndim(step) == 0:
        return step * arr
    return np.reshape(step, np.shape(step) + (1,) * (arr.ndim - np.ndim(step))) * arr


def transport_edge(source, u0, v0, axis, h, nsub, tang=None, norm=None, coords=None,
                   kcoords=None):
    """March the transport system along one grid edge with nsub RK4 steps.

    h may be an array matching the lead shape of u0/v0, giving each lane its
    own (signed) travel.
    """
    u0 = np.asarray(u0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    state = [tang, norm, coords, kcoords]
    step = h / nsub
    s = 0.0
    for _ in range(nsub):
        k = []
        for ds, prev in ((0.0, 0), (0.5, 1), (0.5, 2), (1.0, 3)):
            off = s + ds * step
            uu = u0 + off if axis == 0 else u0
            vv = v0 + off if axis == 1 else v0
            if prev == 0:
                trial = state
            else:
                w = 0.5 if prev in (1, 2) else 1.0
                trial = [None if y is None else y + _smul(w * step, dy)
                         for y, dy in zip(state, k[prev - 1])]
            k.append(_transport_rhs(source, uu, vv, axis, *trial))
        state = [
            y if y is None
            else y + _smul(step / 6.0, k[0][n] + 2 * k[1][n] + 2 * k[2][n] + k[3][n])
            for n, y in enumerate(state)
        ]
        s = s + step
    return tuple(state)


def staircase_transport(source, grid: Grid, base_index, tang0=None, norm0=None,
                        coords0=None, kcoords0=None, nsub=8):
    """Transport seeds from the base node to every node: u-line, then v-lines.

    Seed arrays carry no lane dimensions; returns per-node arrays with leading
    shape (nu, nv).
    """
    nu, nv = grid.nu, grid.nv
    ib, jb = base_index

    def alloc(seed):
        if seed is None:
            return None
        seed = np.asarray(seed, dtype=float)
        out = np.zeros((nu, nv) + seed.shape)
        out[ib, jb] = seed
        return out

    fields = [alloc(s) for s in (tang0, norm0, coords0, kcoords0)]

    def state(index):
        return tuple(None if a is None else a[index] for a in fields)

    def put(index, st):
        for a, s in zip(fields, st):
            if a is not None:
                a[index] = s

    vb = float(grid.vs[jb])
    for i in range(ib, nu - 1):
        st = transport_edge(source, float(grid.us[i]), vb, 0, grid.du, nsub,
                            *state((i, jb)))
        put((i + 1, jb), st)
    for i in range(ib, 0, -1):
        st = transport_edge(source, float(grid.us[i]), vb, 0, -grid.du, nsub,
                            *state((i, jb)))
        put((i - 1, jb), st)

    # every column advances from the base row in lockstep
    for j in range(jb, nv - 1):
        st = transport_edge(source, grid.us, float(grid.vs[j]), 1, grid.dv, nsub,
                            *state((slice(None), j)))
        put((slice(None), j + 1), st)
    for j in range(jb, 0, -1):
        st = transport_edge(source, grid.us, float(grid.vs[j]), 1, -grid.dv, nsub,
                            *state((slice(None), j)))
        put((slice(None), j - 1), st)

    return tuple(fields)


def cell_holonomy(source, grid: Grid, tang_seeds=None, norm_seeds=None, nsub=8):
    """Loop-transport defect per grid cell, in ambient norm.

    tang_seeds: (nu-1, nv-1, K, 2) chart components at each cell's low corner;
    norm_seeds: (nu-1, nv-1, L, 4).  Returns (nu-1, nv-1) max defects.
    """
    U = np.repeat(grid.us[:-1, None], grid.nv - 1, axis=1)
    V = np.repeat(grid.vs[None, :-1], grid.nu - 1, axis=0)
    legs = (
        (0, grid.du, U, V),
        (1, grid.dv, U + grid.du, V),
        (0, -grid.du, U + grid.du, V + grid.dv),
        (1, -grid.dv, U, V + grid.dv),
    )
    t, n = tang_seeds, norm_seeds
    for axis, h, uu, vv in legs:
        t, n, _, _ = transport_edge(source, uu, vv, axis, h, nsub, t, n)
    defect = np.zeros((grid.nu - 1, grid.nv - 1))
    if tang_seeds is not None:
        jac, _ = source.jac_hess(U, V)
        amb0 = np.einsum("...ca,...ka->...kc", jac, tang_seeds)
        amb1 = np.einsum("...ca,...ka->...kc", jac, t)
        defect = np.maximum(defect, np.max(np.linalg.norm(amb1 - amb0, axis=-1), axis=-1))
    if norm_seeds is not None:
        defect = np.maximum(defect, np.max(np.linalg.norm(n - norm_seeds, axis=-1), axis=-1))
    return defect


# --- flat chart and e ---------------------------------------------------------

def _base_frame_comps(jac):
    """Chart components of the Gram-Schmidt tangent frame at one node."""
    guu = jac[:, 0] @ jac[:, 0]
    guv = jac[:, 0] @ jac[:, 1]
    gvv = jac[:, 1] @ jac[:, 1]
    p = 1.0 / math.sqrt(guu)
    qv = 1.0 / math.sqrt(gvv - guv * guv / guu)
    qu = -(guv / guu) * qv
    return np.array([[p, 0.0], [qu, qv]])


def snap_to_node(grid: Grid, base) -> tuple[int, int]:
    ib = int(np.argmin(np.abs(grid.us - float(base[0]))))
    jb = int(np.argmin(np.abs(grid.vs - float(base[1]))))
    return ib, jb


def _resolve_source(spec_or_source):
    if isinstance(spec_or_source, SurfaceSpec):
        return make_source(spec_or_source)
    return spec_or_source


def build_flat_chart(spec_or_source, grid: Grid, base=None,
                     tol: Tolerances = Tolerances(), nsub: int = 8,
                     gg: GridGeometry | None = None,
                     check_holonomy: bool = True,
                     flat_tol: float | None = None) -> FlatChart:
    source = _resolve_source(spec_or_source)
    if gg is None:
        gg = source.node_geometry(grid, tol)
    if flat_tol is not None:
        tier_tol = flat_tol
    else:
        tier_tol = tol.flatness_tol if source.tier == "analytic" else tol.fd_flatness_tol
    if not gg.immersed.any():
        raise FlatnessError("tangent bundle not flat (no immersed nodes)")
    max_k = float(np.max(np.abs(gg.gauss_K[gg.immersed])))
    if max_k >= tier_tol:
        raise FlatnessError(f"tangent bundle not flat (max K = {max_k:.3e})")

    if base is None:
        base = (0.5 * (grid.us[0] + grid.us[-1]), 0.5 * (grid.vs[0] + grid.vs[-1]))
    ib, jb = snap_to_node(grid, base)
    if not gg.immersed[ib, jb]:
        raise FlatnessError("base point is not an immersed node")

    seeds = _base_frame_comps(gg.jac[ib, jb])
    if hasattr(source, "staircase"):
        tang, coords = source.staircase(grid, (ib, jb), seeds, nsub)
    else:
        tang, _, coords, _ = staircase_transport(
            source, grid, (ib, jb), tang0=seeds, coords0=np.zeros(2), nsub=nsub
        )
    frame_ambient = np.einsum("ijca,ijka->ijkc", gg.jac, tang)

    cell_defects = np.zeros((grid.nu - 1, grid.nv - 1))
    holonomy = 0.0
    if check_holonomy:
        cell_defects = cell_holonomy(source, grid, tang_seeds=tang[:-1, :-1], nsub=nsub)
        holonomy = float(np.max(cell_defects))
        limit = tier_tol * (grid.du * grid.dv) * (grid.nu * grid.nv)
        if holonomy >= limit:
            raise PathDependenceError(
                f"path-dependence detected (holonomy {holonomy:.3e} over {limit:.3e})"
            )

    return FlatChart(
        grid=grid,
        base_index=(ib, jb),
        base_point=np.array([grid.us[ib], grid.vs[jb]]),
        frame_comps=tang,
        frame_ambient=frame_ambient,
        flat_coords=coords,
        holonomy_defect=holonomy,
        cell_defects=cell_defects,
        tier=source.tier,
    )


def compute_e(chart: FlatChart, gg: GridGeometry) -> SectionField:
    """e = a E1 + b E2 at every node; zero at the chart base node."""
    values = np.einsum("ijk,ijkc->ijc", chart.flat_coords, chart.frame_ambient)
    return SectionField(
        "tangent", chart.grid, values, gg.immersed.copy(), meta={"chart": chart}
    )


def _shifted_w(source, u, v, comps, coords, axis, h, nsub):
    if hasattr(source, "shifted_w"):
        return source.shifted_w(u, v, comps, coords, axis, h, nsub)
    tang, _, crd, _ = transport_edge(source, u, v, axis, h, nsub,
                                     tang=comps, coords=coords)
    us = u + h if axis == 0 else u
    vs = v + h if axis == 1 else v
    jac, _ = source.jac_hess(us, vs)
    E = np.einsum("...ib,...cb->...ic", tang, jac)
    return np.einsum("...i,...ic->...c", crd, E)


def chart_field_derivatives(chart: FlatChart, source, delta: float = 1e-4,
                            nsub: int = 1):
    """d/du and d/dv of w = a E1 + b E2 by short transported continuations.

    Grid-stride differences of the assembled field compound the coordinate
    scale with the frame's rotation rate and lose several digits; continuing
    each node's chart state a distance delta (far below the grid step) and
    differencing centrally keeps truncation near roundoff.  Boundary nodes
    fall back to one-sided second-order differences on the in-domain side.
    Returns (dw_u, dw_v), shaped (nu, nv, 4).
    """
    grid = chart.grid
    U, V = grid.meshes()
    comps, coords = chart.frame_comps, chart.flat_coords
    out = []
    for axis in (0, 1):
        mesh = U if axis == 0 else V
        lo, hi = (grid.us[0], grid.us[-1]) if axis == 0 else (grid.vs[0], grid.vs[-1])
        can_minus = mesh - delta >= lo
        can_plus = mesh + delta <= hi
        central = can_minus & can_plus
        forward = ~can_minus
        backward = ~can_plus & can_minus
        d = np.zeros(grid.shape + (4,))
        for sel, side in ((central, 0.0), (forward, 1.0), (backward, -1.0)):
            if not sel.any():
                continue
            u_s, v_s = U[sel], V[sel]
            cp, cr = comps[sel], coords[sel]
            if side == 0.0:
                wp = _shifted_w(source, u_s, v_s, cp, cr, axis, delta, nsub)
                wm = _shifted_w(source, u_s, v_s, cp, cr, axis, -delta, nsub)
                d[sel] = (wp - wm) / (2.0 * delta)
            else:
                jac0, _ = source.jac_hess(u_s, v_s)
                E0 = np.einsum("...ib,...cb->...ic", cp, jac0)
                w0 = np.einsum("...i,...ic->...c", cr, E0)
                w1 = _shifted_w(source, u_s, v_s, cp, cr, axis, side * delta, nsub)
                w2 = _shifted_w(source, u_s, v_s, cp, cr, axis, 2.0 * side * delta, nsub)
                d[sel] = side * (-3.0 * w0 + 4.0 * w1 - w2) / (2.0 * delta)
        out.append(d)
    return out[0], out[1]


def parallel_field(spec_or_source, grid: Grid, bundle: str, seed, base=None,
                   tol: Tolerances = Tolerances(), nsub: int = 8,
                   gg: GridGeometry | None = None) -> SectionField:
    """Parallel transport of one seed vector over the staircase paths."""
    source = _resolve_source(spec_or_source)
    if gg is None:
        gg = source.node_geometry(grid, tol)
    tier_tol = tol.flatness_tol if source.tier == "analytic" else tol.fd_flatness_tol
    if base is None:
        base = (0.5 * (grid.us[0] + grid.us[-1]), 0.5 * (grid.vs[0] + grid.vs[-1]))
    ib, jb = snap_to_node(grid, base)
    seed = np.asarray(seed, dtype=float)

    if bundle == "tangent":
        max_k = float(np.max(np.abs(gg.gauss_K[gg.immersed])))
        if max_k >= tier_tol:
            raise FlatnessError(f"tangent bundle not flat (max K = {max_k:.3e})")
        jac = gg.jac[ib, jb]
        g = jac.T @ jac
        comps0 = np.linalg.solve(g, jac.T @ seed)
        tang, _, _, _ = staircase_transport(source, grid, (ib, jb),
                                            tang0=comps0[None, :], nsub=nsub)
        values = np.einsum("ijca,ijka->ijkc", gg.jac, tang)[:, :, 0, :]
        defects = cell_holonomy(source, grid, tang_seeds=tang[:-1, :-1], nsub=nsub)
    elif bundle == "normal":
        max_nk = float(np.max(np.abs(gg.normal_K[gg.immersed])))
        if max_nk >= tier_tol:
            raise FlatnessError(f"normal bundle not flat (max K = {max_nk:.3e})")
        _, norm, _, _ = staircase_transport(source, grid, (ib, jb),
                                            norm0=seed[None, :], nsub=nsub)
        values = norm[:, :, 0, :]
        defects = cell_holonomy(source, grid, norm_seeds=norm[:-1, :-1], nsub=nsub)
    else:
        raise ValueError("bundle must be 'tangent' or 'normal'")

    return SectionField(
        bundle, grid, values, gg.immersed.copy(),
        meta={"holonomy_defect": float(np.max(defects)), "base_index": (ib, jb)},
    )


# --- c and j ------------------------------------------------------------------

def _c_mask(gg: GridGeometry, tol: Tolerances):
    kinds, _ = classify_grid(gg, tol)
    hjb = gg.H[..., 1] * gg.B[..., 0] - gg.H[..., 0] * gg.B[..., 1]
    usable = gg.immersed & (kinds != UMBILIC) & (kinds != INFLECTION)
    return usable & (np.abs(hjb) >= 1e-12), hjb


def compute_c(pg, classification) -> np.ndarray:
    """The unique normal vector with c.alpha = g, by the rotated-axis formula."""
    if classification.kind in ("umbilic", "inflection"):
        raise CDefinitionError("c undefined: inflection point")
    jb = np.array([-pg.B[1], pg.B[0]])
    denom = float(pg.H @ jb)
    if abs(denom) < 1e-12:
        raise CDefinitionError("degenerate ellipse data")
    cn = jb / denom
    return cn[0] * pg.n1 + cn[1] * pg.n2


def c_nearest_point(pg) -> np.ndarray:
    """Cross-check formula: c = n_p / (n_p . n_p) with n_p the point of the
    ellipse's axis line nearest the origin of the normal plane."""
    nb = float(np.linalg.norm(pg.B))
    if nb < 1e-300:
        raise CDefinitionError("degenerate ellipse data")
    bhat = pg.B / nb
    n_p = pg.H - float(pg.H @ bhat) * bhat
    nn = float(n_p @ n_p)
    if nn < 1e-300:
        raise CDefinitionError("c undefined: inflection point")
    cn = n_p / nn
    return cn[0] * pg.n1 + cn[1] * pg.n2


def compute_c_field(gg: GridGeometry, grid: Grid,
                    tol: Tolerances = Tolerances()) -> SectionField:
    """c at every usable node.  Stores the rotated-axis route; the
    nearest-point route rides along in meta for the agreement check."""
    mask, hjb = _c_mask(gg, tol)
    safe = np.where(np.abs(hjb) >= 1e-12, hjb, 1.0)
    jb0, jb1 = -gg.B[..., 1], gg.B[..., 0]
    c_rot = (jb0[..., None] * gg.n1 + jb1[..., None] * gg.n2) / safe[..., None]

    nb = np.linalg.norm(gg.B, axis=-1)
    bhat = gg.B / np.where(nb > 0, nb, 1.0)[..., None]
    n_p = gg.H - np.sum(gg.H * bhat, axis=-1, keepdims=True) * bhat
    nn = np.sum(n_p * n_p, axis=-1)
    cn = n_p / np.where(nn > 0, nn, 1.0)[..., None]
    c_near = cn[..., 0:1] * gg.n1 + cn[..., 1:2] * gg.n2

    return SectionField("normal", grid, c_rot, mask, meta={"nearest_point": c_near})


def field_jets(values, grid: Grid, mask=None, order: int = 1, levels: int = 3):
    """Stride-difference jets of node fields; the validity mask erodes by the
    stencil reach so no valid output stencil touches an undefined node."""
    values = np.asarray(values, dtype=float)
    squeeze = values.ndim == 2
    if squeeze:
        values = values[..., None]
    work = values if mask is None else np.where(mask[..., None], values, 0.0)
    jets, ok = grid_jets(work, grid.du, grid.dv, order=order, levels=levels)
    if mask is not None:
        ok = ok & erode_mask(mask, 2 ** (levels - 1))
    if squeeze:
        return jets[0], ok
    return jets, ok


def erode_mask(mask: np.ndarray, margin: int) -> np.ndarray:
    out = mask.copy()
    for di in range(-margin, margin + 1):
        for dj in range(-margin, margin + 1):
            if di or dj:
                out &= np.roll(np.roll(mask, di, axis=0), dj, axis=1)
    return out


def j_both_formulas(gg: GridGeometry, c_field: SectionField, grid: Grid,
                    c_jets=None, levels: int = 3):
    """j by the component formula and by the gradient formula.

    Returns (j_component, j_gradient, mask).  With analytic c jets the
    derivatives are exact; otherwise they come from stride differences of the
    node field.
    """
    if c_jets is not None:
        dc_u = np.stack([j.du().value for j in c_jets], axis=-1)
        dc_v = np.stack([j.dv().value for j in c_jets], axis=-1)
        mask = c_field.mask.copy()
    else:
        jets, ok = field_jets(c_field.values, grid, c_field.mask, order=1, levels=levels)
        dc_u = np.stack([j.du().value for j in jets], axis=-1)
        dc_v = np.stack([j.dv().value for j in jets], axis=-1)
        mask = ok & c_field.mask

    c = c_field.values
    # gradient formula: j = 1/2 g^{ab} d_b(c.c) x_a
    ds = np.stack([np.sum(c * dc_u, axis=-1), np.sum(c * dc_v, axis=-1)], axis=-1)
    coef = np.einsum("...ab,...b->...a", gg.ginv, ds)
    j_grad = np.einsum("...ca,...a->...c", gg.jac, coef)

    # component formula along the aligned frame directions
    comps1 = _tangent_comps(gg, gg.t1)
    comps2 = _tangent_comps(gg, gg.t2)
    d_t1_c = comps1[..., 0:1] * dc_u + comps1[..., 1:2] * dc_v
    d_t2_c = comps2[..., 0:1] * dc_u + comps2[..., 1:2] * dc_v
    b1a = gg.b1[..., 0:1] * gg.n1 + gg.b1[..., 1:2] * gg.n2
    b2a = gg.b2[..., 0:1] * gg.n1 + gg.b2[..., 1:2] * gg.n2
    denom1 = np.sum(b1a * b1a, axis=-1)
    denom2 = np.sum(b2a * b2a, axis=-1)
    ok_denom = (denom1 > 1e-300) & (denom2 > 1e-300)
    denom1 = np.where(ok_denom, denom1, 1.0)
    denom2 = np.where(ok_denom, denom2, 1.0)
    coef1 = np.sum(b1a * d_t1_c, axis=-1) / denom1
    coef2 = np.sum(b2a * d_t2_c, axis=-1) / denom2
    j_comp = coef1[..., None] * gg.t1 + coef2[..., None] * gg.t2
    return j_comp, j_grad, mask & ok_denom


def _tangent_comps(gg: GridGeometry, vec):
    rhs = np.einsum("...ca,...c->...a", gg.jac, vec)
    return np.einsum("...ab,...b->...a", gg.ginv, rhs)


def compute_j(gg: GridGeometry, c_field: SectionField, grid: Grid,
              tol: Tolerances = Tolerances(), c_jets=None) -> SectionField:
    j_comp, j_grad, mask = j_both_formulas(gg, c_field, grid, c_jets=c_jets)
    disagreement = np.linalg.norm(j_comp - j_grad, axis=-1)
    worst = float(np.max(disagreement[mask])) if mask.any() else 0.0
    return SectionField(
        "tangent", grid, j_comp, mask,
        meta={"gradient_values": j_grad, "formula_disagreement": worst},
    )


# --- analytic c jets -----------------------------------------------------------

def c_jets_on_grid(spec: SurfaceSpec, grid: Grid, gg: GridGeometry,
                   tol: Tolerances = Tolerances()):
    """Order-2 jets of c on an analytic surface, via the frame-free least
    squares solve of c.alpha = g in jet arithmetic.

    Returns (list of 4 Jet2, mask).  The solve and the closed formulas agree
    wherever both are defined; tests pin that down.
    """
    if not spec.analytic:
        raise ValueError("analytic surface required for c jets")
    U, V = grid.meshes()
    x_jets = eval_surface(spec, (U, V), 4)
    mask, _ = _c_mask(gg, tol)
    x_jets = sanitize_jets(x_jets, mask)

    xu = [j.du().truncated(2) for j in x_jets]
    xv = [j.dv().truncated(2) for j in x_jets]
    xuu = [j.du().du() for j in x_jets]
    xuv = [j.du().dv() for j in x_jets]
    xvv = [j.dv().dv() for j in x_jets]
    x2 = [j.truncated(2) for j in x_jets]

    seed_arr = _jet_seed_one_hot(xu, xv)
    seed = [Jet2.constant(seed_arr[..., a], 2) for a in range(4)]
    data = frame_pipeline(x2, xu, xv, xuu, xuv, xvv, seed)
    w1, w2 = data["n1"], data["n2"]

    guu, guv, gvv = data["g"]
    m11 = m12 = m22 = r1 = r2 = None
    for x_ab, rhs in ((xuu, guu), (xuv, guv), (xvv, gvv)):
        a1 = _jet_dot(x_ab, w1)
        a2 = _jet_dot(x_ab, w2)
        m11 = a1 * a1 if m11 is None else m11 + a1 * a1
        m12 = a1 * a2 if m12 is None else m12 + a1 * a2
        m22 = a2 * a2 if m22 is None else m22 + a2 * a2
        r1 = a1 * rhs if r1 is None else r1 + a1 * rhs
        r2 = a2 * rhs if r2 is None else r2 + a2 * rhs
    det = m11 * m22 - m12 * m12
    ok = mask & (np.abs(det.value) > 1e-12)
    det = jets_where(ok, det, Jet2.constant(np.ones(det.value.shape), 2))
    lam = (m22 * r1 - m12 * r2) / det
    mu = (m11 * r2 - m12 * r1) / det
    c_jets = [lam * a + mu * b for a, b in zip(w1, w2)]
    return c_jets, ok


def _jet_dot(a, b):
    acc = a[0] * b[0]
    for x, y in zip(a[1:], b[1:]):
        acc = acc + x * y
    return acc


def _jet_seed_one_hot(xu, xv):
    t1 = np.stack([j.value for j in xu], axis=-1)
    t1 = t1 / np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.stack([j.value for j in xv], axis=-1)
    t2 = t2 - np.sum(t2 * t1, axis=-1, keepdims=True) * t1
    t2 = t2 / np.linalg.norm(t2, axis=-1, keepdims=True)
    resid = 1.0 - t1**2 - t2**2
    return np.eye(4)[np.argmax(resid, axis=-1)]


# --- jet completion -------------------------------------------------------------

def complete_jets_pde(values, order: int, rhs_fn):
    """Build jets of a field from node values and its first-order PDE.

    rhs_fn(jets, axis) returns jets of the axis-derivative of the field,
    trusted to the degree its inputs are trusted to.  Coefficients fill in
    triangular order: degree d+1 u-leading terms come from the u equation,
    the pure-v term from the v equation.
    """
    values = np.asarray(values, dtype=float)
    d = values.shape[-1]
    jets = [Jet2.constant(values[..., i], order) for i in range(d)]
    for deg in range(order):
        fu = rhs_fn(jets, 0)
        fv = rhs_fn(jets, 1)
        for w, wu, wv in zip(jets, fu, fv):
            for i in range(deg, -1, -1):
                j = deg - i
                w.coeffs[..., coeff_index(i + 1, j)] = (
                    wu.coeffs[..., coeff_index(i, j)] / (i + 1)
                )
            w.coeffs[..., coeff_index(0, deg + 1)] = (
                wv.coeffs[..., coeff_index(0, deg)] / (deg + 1)
            )
    return jets


def connection_jets(x_jets, order: int):
    """Jet-valued metric, inverse, Christoffels and ambient second form."""
    xu = [j.du().truncated(order) for j in x_jets]
    xv = [j.dv().truncated(order) for j in x_jets]
    xk = [
        [j.du().du().truncated(order) for j in x_jets],
        [j.du().dv().truncated(order) for j in x_jets],
        [j.dv().dv().truncated(order) for j in x_jets],
    ]
    jac = [xu, xv]
    guu = _jet_dot(xu, xu)
    guv = _jet_dot(xu, xv)
    gvv = _jet_dot(xv, xv)
    det = guu * gvv - guv * guv
    ginv = [
        [gvv / det, (guv / det) * -1.0],
        [(guv / det) * -1.0, guu / det],
    ]
    gam = [[None] * 3 for _ in range(2)]
    alpha = [None] * 3
    for kk in range(3):
        pu = _jet_dot(xu, xk[kk])
        pv = _jet_dot(xv, xk[kk])
        for a in range(2):
            gam[a][kk] = ginv[a][0] * pu + ginv[a][1] * pv
        alpha[kk] = [
            comp - gam[0][kk] * ju - gam[1][kk] * jv
            for comp, ju, jv in zip(xk[kk], xu, xv)
        ]
    g = [[guu, guv], [guv, gvv]]
    return {"jac": jac, "g": g, "ginv": ginv, "gam": gam, "alpha": alpha}


def e_completion_jets(x_jets, e_values, order: int = 2):
    """Ambient jets of a tangent field whose tangential derivative is the
    identity, from its node values: d_m w^a = delta_m^a - Gamma^a_{mb} w^b.

    Returns (ambient jets, component jets).
    """
    conn = connection_jets(x_jets, order)
    gam, jac, g = conn["gam"], conn["jac"], conn["g"]

    jac_vals = np.stack(
        [np.stack([j.value for j in jac[a]], axis=-1) for a in range(2)], axis=-1
    )
    rhs = np.einsum("...ca,...c->...a", jac_vals, np.asarray(e_values, float))
    g_vals = np.stack(
        [np.stack([g[a][b].value for b in range(2)], axis=-1) for a in range(2)],
        axis=-2,
    )
    comps0 = np.linalg.solve(g_vals, rhs[..., None])[..., 0]

    one = Jet2.constant(np.ones(comps0.shape[:-1]), order)
    zero = one * 0.0

    def rhs_fn(jets, axis):
        out = []
        for a in range(2):
            acc = one if a == axis else zero
            for b in range(2):
                acc = acc - gam[a][axis + b] * jets[b]
            out.append(acc)
        return out

    comp_jets = complete_jets_pde(comps0, order, rhs_fn)
    ambient = [comp_jets[0] * jac[0][c] + comp_jets[1] * jac[1][c] for c in range(4)]
    return ambient, comp_jets


def normal_completion_jets(x_jets, xi_values, order: int = 2, perp_rhs=None):
    """Ambient jets of a normal field from node values and its normal-bundle
    derivative: d_m xi = -g^{ab} (xi . alpha_{ma}) x_b + perp_rhs[m].

    perp_rhs, if given, is a pair (axis 0, axis 1) of 4-lists of jets for the
    prescribed normal part; omitted means a parallel normal field.
    """
    conn = connection_jets(x_jets, order)
    jac, ginv, alpha = conn["jac"], conn["ginv"], conn["alpha"]

    def rhs_fn(jets, axis):
        dots = [_jet_dot(jets, alpha[axis + a]) for a in range(2)]
        coef = [ginv[b][0] * dots[0] + ginv[b][1] * dots[1] for b in range(2)]
        out = []
        for c in range(4):
            val = (coef[0] * jac[0][c] + coef[1] * jac[1][c]) * -1.0
            if perp_rhs is not None:
                val = val + perp_rhs[axis][c]
            out.append(val)
        return out

    return complete_jets_pde(np.asarray(xi_values, float), order, rhs_fn)


# --- k through the envelope ------------------------------------------------------

def envelope_jets(source, grid: Grid, e_values):
    """Order-2 jets of the envelope map x - e at the nodes.

    The defining equation of e turns the map's jacobian into -alpha(., e),
    data already on hand, so rank degeneracy near the zeros of e is resolved
    at field accuracy instead of stride-difference accuracy.  Analytic
    surfaces get the hessian the same way through jet completion; sampled
    ones fall back to stride differences of the assembled jacobian field.
    Returns (point, jac, hess, ok) node fields.
    """
    e_values = np.asarray(e_values, dtype=float)
    U, V = grid.meshes()
    if source.tier == "analytic":
        x_jets = eval_surface(source.spec, (U, V), 4)
        ambient, _ = e_completion_jets(x_jets, e_values, order=2)
        w_jets = [x.truncated(2) - a for x, a in zip(x_jets, ambient)]
        point = np.stack([j.value for j in w_jets], axis=-1)
        jac, hess = _jets_to_jac_hess(w_jets)
        return point, jac, hess, np.ones(grid.shape, dtype=bool)

    jac_x, hess_x = source.jac_hess(U, V)
    g, ginv, gam, alpha = connection_from_jac_hess(jac_x, hess_x)
    rhs = np.einsum("...ca,...c->...a", jac_x, e_values)
    w = np.einsum("...ab,...b->...a", ginv, rhs)
    jac = np.empty_like(jac_x)
    for m in range(2):
        jac[..., m] = -np.einsum("...cb,...b->...c", alpha[..., :, m : m + 2], w)
    point = source.point(U, V) - e_values
    djets, ok = field_jets(jac.reshape(grid.shape + (8,)), grid, order=1, levels=3)
    hess = np.empty(grid.shape + (4, 3))
    for c in range(4):
        ju, jv = djets[2 * c], djets[2 * c + 1]
        hess[..., c, 0] = ju.du().value
        hess[..., c, 1] = 0.5 * (ju.dv().value + jv.du().value)
        hess[..., c, 2] = jv.dv().value
    return point, jac, hess, ok


def largest_true_rectangle(mask: np.ndarray):
    """Indices (i0, i1, j0, j1) of the largest all-True axis rectangle
    (half-open), by the histogram-of-heights method."""
    nu, nv = mask.shape
    best = (0, 0, 0, 0)
    best_area = 0
    heights = np.zeros(nv, dtype=int)
    for i in range(nu):
        heights = np.where(mask[i], heights + 1, 0)
        stack: list[int] = []
        j = 0
        while j <= nv:
            h = heights[j] if j < nv else 0
            if not stack or heights[stack[-1]] <= h:
                stack.append(j)
                j += 1
                continue
            top = stack.pop()
            width_start = stack[-1] + 1 if stack else 0
            area = heights[top] * (j - width_start)
            if area > best_area:
                best_area = area
                best = (i - heights[top] + 1, i + 1, width_start, j)
    return best


def refine_grid(grid: Grid, factor: int) -> Grid:
    if factor == 1:
        return grid
    nu = (grid.nu - 1) * factor + 1
    nv = (grid.nv - 1) * factor + 1
    return Grid(np.linspace(grid.us[0], grid.us[-1], nu),
                np.linspace(grid.vs[0], grid.vs[-1], nv))


def compute_k(spec: SurfaceSpec, grid: Grid, e_field: SectionField,
              gg: GridGeometry, tol: Tolerances = Tolerances(),
              base=None, nsub: int = 8, refine: int = 2,
              min_side: int = 8) -> SectionField:
    """k = -(envelope's own e) pulled back through f = id - e.

    The envelope image is sampled on the same (u, v) lattice, so the pullback
    is an index map: k at node (i, j) is minus the image chart's e at image
    node (i, j).  Rank-deficient image nodes are excluded and the image chart
    lives on the largest rank-2 rectangle (the working subgrid).  The result
    sits on the full grid with the mask off outside that subgrid.

    Analytic surfaces drive the image chart off an EnvelopeSource, whose
    connection is assembled exactly at every query; sampled ones build
    precomputed derivative fields on an internally refined lattice (factor
    `refine`) and interpolate between nodes.  The image flatness gate runs at
    the stride-difference tier for both: the image's curvature estimate
    divides by the fourth power of the distance to the excluded set, so
    nodes beside it wobble at that scale even on exact field data.

    The gauge rides the defining equation: the normal coordinates of k
    integrate alongside the frames from the base node, where k vanishes with
    e, and the pulled-back field is slid by a parallel normal correction to
    match.
    """
    source = _resolve_source(spec)
    tier_tol = tol.flatness_tol if source.tier == "analytic" else tol.fd_flatness_tol
    max_nk = float(np.max(np.abs(gg.normal_K[gg.immersed])))
    if max_nk >= tier_tol:
        raise FlatnessError(f"normal bundle not flat (max K = {max_nk:.3e})")

    # the e field's own gauge is authoritative: rebuilding with any other
    # base point would shift the flat coordinates
    chart = e_field.meta.get("chart")
    if chart is None:
        if base is None:
            raise ValueError("e field carries no chart and no base point was given")
        chart = build_flat_chart(source, grid, base, tol, nsub=nsub, gg=gg,
                                 check_holonomy=False)
        if e_field.mask.any():
            rebuilt = compute_e(chart, gg).values
            drift = np.max(
                np.linalg.norm(rebuilt - e_field.values, axis=-1)[e_field.mask])
            if drift > 1e-6 * (1.0 + float(np.max(np.abs(e_field.values)))):
                raise ValueError("e field is not chart-consistent with its base gauge")
    base = tuple(chart.base_point)

    if source.tier == "analytic":
        W, jacW, hessW, ok = envelope_jets(source, grid, e_field.values)
        rank = jacobian_rank(jacW, tol.rank_tol)
        marginal = _marginal_mask(jacW, tol.rank_tol)
        usable = (rank == 2) & ~marginal & e_field.mask & gg.immersed & ok
        i0, i1, j0, j1 = (int(t) for t in largest_true_rectangle(usable))
        if (i1 - i0) < min_side or (j1 - j0) < min_side:
            raise EnvelopeRankError("envelope not an immersion")
        vsource = EnvelopeSource(source, chart)
        sub = Grid(grid.us[i0:i1], grid.vs[j0:j1])
        vgg = vsource.node_geometry(sub, tol)
        ci = i0 + (i1 - 1 - i0) // 2
        cj = j0 + (j1 - 1 - j0) // 2
        vchart = build_flat_chart(vsource, sub, (grid.us[ci], grid.vs[cj]), tol,
                                  nsub=nsub, gg=vgg, check_holonomy=False,
                                  flat_tol=tol.fd_flatness_tol)
        e_tilde = compute_e(vchart, vgg)
        k_raw = -e_tilde.values
        k_mask = e_tilde.mask
        W_nodes = W
    else:
        fine = refine_grid(grid, refine)
        if refine == 1:
            gg_fine = gg
            e_fine = e_field.values
        else:
            gg_fine = source.node_geometry(fine, tol)
            chart_fine = build_flat_chart(source, fine, base, tol, nsub=nsub,
                                          gg=gg_fine, check_holonomy=False)
            e_fine = compute_e(chart_fine, gg_fine).values

        W_fine, jacW_fine, hessW_fine, ok_fine = envelope_jets(source, fine, e_fine)

        # rank on the run lattice decides the working subgrid
        jac_img = jacW_fine[::refine, ::refine]
        rank = jacobian_rank(jac_img, tol.rank_tol)
        marginal = _marginal_mask(jac_img, tol.rank_tol)
        usable = ((rank == 2) & ~marginal & e_field.mask & gg.immersed
                  & ok_fine[::refine, ::refine])
        i0, i1, j0, j1 = (int(t) for t in largest_true_rectangle(usable))
        if (i1 - i0) < min_side or (j1 - j0) < min_side:
            raise EnvelopeRankError("envelope not an immersion")

        fi0, fi1 = i0 * refine, (i1 - 1) * refine + 1
        fj0, fj1 = j0 * refine, (j1 - 1) * refine + 1
        vsource = GridSource(fine.us[fi0:fi1], fine.vs[fj0:fj1],
                             W_fine[fi0:fi1, fj0:fj1],
                             jac=jacW_fine[fi0:fi1, fj0:fj1],
                             hess=hessW_fine[fi0:fi1, fj0:fj1])
        sub_fine = vsource.grid
        vgg = vsource.node_geometry(sub_fine, tol)
        ci = i0 + (i1 - 1 - i0) // 2
        cj = j0 + (j1 - 1 - j0) // 2
        vchart = build_flat_chart(vsource, sub_fine, (grid.us[ci], grid.vs[cj]),
                                  tol, nsub=nsub, gg=vgg, check_holonomy=False)
        e_tilde = compute_e(vchart, vgg)
        k_raw = -e_tilde.values[::refine, ::refine]
        k_mask = e_tilde.mask[::refine, ::refine]
        W_nodes = W_fine[::refine, ::refine]

    ib, jb = snap_to_node(grid, base)
    seeds = _base_frame_comps(gg.jac[ib, jb])
    norm0 = np.stack([gg.n1[ib, jb], gg.n2[ib, jb]])
    _, par_norm, _, kco = staircase_transport(
        source, grid, (ib, jb), tang0=seeds, norm0=norm0,
        coords0=np.zeros(2), kcoords0=np.zeros(2), nsub=nsub)
    k_direct = np.einsum("ijl,ijlc->ijc", kco, par_norm)
    gap = k_raw[ci - i0, cj - j0] - k_direct[ci, cj]
    p = par_norm[ci, cj] @ gap
    correction = np.einsum("l,ijlc->ijc", p, par_norm[i0:i1, j0:j1])

    values = np.zeros_like(e_field.values)
    mask = np.zeros(grid.shape, dtype=bool)
    values[i0:i1, j0:j1] = k_raw - correction
    mask[i0:i1, j0:j1] = k_mask & usable[i0:i1, j0:j1]
    return SectionField(
        "normal", grid, values, mask,
        meta={
            "subgrid": (i0, i1, j0, j1),
            "rank_map": rank,
            "marginal": marginal,
            "vchart": vchart,
            "vsource": vsource,
            "envelope_points": W_nodes,
            "direct_values": k_direct,
            "direct_mask": gg.immersed.copy(),
            "parallel_normals": par_norm,
        },
    )


def _marginal_mask(jac, rank_tol):
    g11 = np.sum(jac[..., 0] * jac[..., 0], axis=-1)
    g12 = np.sum(jac[..., 0] * jac[..., 1], axis=-1)
    g22 = np.sum(jac[..., 1] * jac[..., 1], axis=-1)
    mean = 0.5 * (g11 + g22)
    spread = np.sqrt((0.5 * (g11 - g22)) ** 2 + g12**2)
    sig_min = np.sqrt(np.maximum(mean - spread, 0.0))
    return (sig_min >= rank_tol) & (sig_min < 100.0 * rank_tol)
