"""Geometry oracles: product families, graph surfaces, spheres, gauge invariance."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surf4.geometry import (
    NotImmersionError,
    Tolerances,
    classify,
    classify_grid,
    eta_of_theta,
    gauss_curvature,
    geometry_from_jets,
    grid_geometry,
    jacobian_rank,
    normal_degeneracy,
    point_geometry,
    KIND_NAMES,
)
from surf4.surfaces import (
    Grid,
    PlaneCurve,
    eval_surface,
    expression_surface,
    product_surface,
)

CLIFFORD = product_surface(
    PlaneCurve("circle", radius=1.0, arc_length=True),
    PlaneCurve("circle", radius=1.0, arc_length=True),
)
ELL_PROD = product_surface(
    PlaneCurve("ellipse", a=2.0, b=1.0), PlaneCurve("ellipse", a=3.0, b=1.0)
)
PLANE = expression_surface(("u", "v", "0", "0"), (-2, 2, -2, 2))
GRAPH = expression_surface(("u", "v", "u^2 - v^2", "2*u*v"), (-1, 1, -1, 1))


def ellipse_kappa(a, b, t):
    """Signed curvature magnitude of (a cos t, b sin t)."""
    return a * b / (a * a * math.sin(t) ** 2 + b * b * math.cos(t) ** 2) ** 1.5


def ambient(pg, vec2):
    return vec2[0] * pg.n1 + vec2[1] * pg.n2


# --- frame and form oracles ---------------------------------------------------

def test_clifford_torus_node():
    pg = point_geometry(CLIFFORD, (0.7, 1.3))
    np.testing.assert_allclose(pg.g, np.eye(2), atol=1e-14)
    # ambient second-form values do not depend on the normal frame gauge
    b1_amb = ambient(pg, pg.b1)
    b2_amb = ambient(pg, pg.b2)
    np.testing.assert_allclose(
        b1_amb, [-math.cos(0.7), -math.sin(0.7), 0, 0], atol=1e-12
    )
    np.testing.assert_allclose(
        b2_amb, [0, 0, -math.cos(1.3), -math.sin(1.3)], atol=1e-12
    )
    np.testing.assert_allclose(pg.b3, [0, 0], atol=1e-13)
    assert abs(pg.H @ pg.H - 0.5) < 1e-13
    assert abs(pg.B @ pg.B - 0.5) < 1e-13
    assert abs(pg.gauss_K) < 1e-13
    assert abs(pg.normal_K_indicator) < 1e-13


def test_clifford_torus_classification():
    pg = point_geometry(CLIFFORD, (0.7, 1.3))
    cl = classify(pg)
    assert cl.kind == "semiumbilic_regular"
    assert len(cl.asymptotic_angles) == 2
    a0, a1 = cl.asymptotic_angles
    assert abs(abs(a1 - a0) - math.pi / 2) < 1e-12
    assert abs(cl.ellipse_line_distance - 1 / math.sqrt(2)) < 1e-12


def test_frames_orthonormal_oriented():
    g = Grid.regular(ELL_PROD.domain, 24, 24)
    gg = grid_geometry(ELL_PROD, g)
    frames = np.stack([gg.t1, gg.t2, gg.n1, gg.n2], axis=-2)  # (...,4,4)
    gram = frames @ frames.swapaxes(-1, -2)
    assert np.max(np.abs(gram - np.eye(4))) < 1e-10
    dets = np.linalg.det(frames.swapaxes(-1, -2))
    np.testing.assert_allclose(dets, 1.0, atol=1e-10)


def test_plane_umbilic():
    pg = point_geometry(PLANE, (0.2, -0.3))
    assert classify(pg).kind == "umbilic"
    assert gauss_curvature(pg) == 0.0
    assert normal_degeneracy(pg) == 0.0
    np.testing.assert_allclose(pg.H, 0.0, atol=0)


def test_graph_circle_ellipse():
    # brute-force eta over a 360-point grid must trace a circle of radius 2
    pg = point_geometry(GRAPH, (0.0, 0.0))
    thetas = np.linspace(0, 2 * math.pi, 360, endpoint=False)
    eta = eta_of_theta(pg, thetas)
    radii = np.linalg.norm(eta - pg.H, axis=-1)
    np.testing.assert_allclose(radii, 2.0, atol=1e-12)
    np.testing.assert_allclose(pg.H, [0, 0], atol=1e-12)
    assert abs(pg.B @ pg.B - 4.0) < 1e-12
    assert abs(pg.C @ pg.C - 4.0) < 1e-12
    assert abs(pg.B @ pg.C) < 1e-12
    assert not pg.aligned  # near-circular: rotation skipped and flagged
    assert classify(pg).kind == "nondegenerate"


def test_sphere_in_three_plane():
    r = 2.0
    sph = expression_surface(
        ("2*sin(u)*cos(v)", "2*sin(u)*sin(v)", "2*cos(u)", "0"),
        (0.3, 2.8, 0.0, 6.3),
    )
    pg = point_geometry(sph, (1.1, 2.2))
    assert abs(gauss_curvature(pg) - 1 / r**2) < 1e-12
    assert normal_degeneracy(pg) < 1e-12
    assert classify(pg).kind == "umbilic"


def test_ellipse_product_curvature_oracle():
    for u, v in [(0.0, 0.0), (0.9, 0.4), (2.0, 5.1)]:
        pg = point_geometry(ELL_PROD, (u, v))
        k1 = ellipse_kappa(2.0, 1.0, u)
        k2 = ellipse_kappa(3.0, 1.0, v)
        mags = sorted([np.linalg.norm(pg.b1), np.linalg.norm(pg.b2)])
        np.testing.assert_allclose(mags, sorted([k1, k2]), atol=1e-12)
        assert np.linalg.norm(pg.b3) < 1e-12
        assert abs(pg.b1 @ pg.b2) < 1e-12  # factor curvature vectors orthogonal
        assert classify(pg).kind == "semiumbilic_regular"


def test_eta_endpoint_values():
    pg = point_geometry(ELL_PROD, (0.9, 0.4))
    np.testing.assert_allclose(eta_of_theta(pg, 0.0), pg.H + pg.B, atol=1e-15)
    np.testing.assert_allclose(eta_of_theta(pg, math.pi / 2), pg.H - pg.B, atol=1e-14)
    np.testing.assert_allclose(eta_of_theta(pg, math.pi / 4), pg.H + pg.C, atol=1e-14)
    # aligned frame: |eta - H| peaks at the asymptotic angles
    thetas = np.linspace(0, math.pi, 181)
    spread = np.linalg.norm(eta_of_theta(pg, thetas) - pg.H, axis=-1)
    assert np.max(spread) <= np.linalg.norm(pg.B) + 1e-12


def test_semiumbilic_endpoints_across_grid():
    g = Grid.regular(ELL_PROD.domain, 32, 32)
    gg = grid_geometry(ELL_PROD, g)
    kinds, _ = classify_grid(gg)
    assert set(np.unique(kinds)) == {KIND_NAMES.index("semiumbilic_regular")}
    # eta at the first asymptotic direction equals H + B everywhere
    endpoint = gg.H + gg.B
    np.testing.assert_allclose(gg.b1, endpoint, atol=1e-12)
    assert np.max(np.linalg.norm(gg.C, axis=-1)) < 1e-12


def test_gauss_equation_consistency():
    # gauss_K defined through H, B, C must equal b1.b2 - b3.b3
    for spec, at in [(ELL_PROD, (1.1, 0.3)), (GRAPH, (0.2, 0.1)), (CLIFFORD, (2.0, 0.5))]:
        pg = point_geometry(spec, at)
        other = pg.b1 @ pg.b2 - pg.b3 @ pg.b3
        assert abs(pg.gauss_K - other) < 1e-11


# --- gauge invariance ----------------------------------------------------------

def rotated_graph(psi):
    c, s = math.cos(psi), math.sin(psi)
    ru = f"({c!r}*u - {s!r}*v)"
    rv = f"({s!r}*u + {c!r}*v)"
    comps = tuple(
        src.replace("U", ru).replace("V", rv)
        for src in ("U", "V", "U^2 - V^2", "2*U*V")
    )
    return expression_surface(comps, (-2, 2, -2, 2))


@settings(max_examples=25, deadline=None)
@given(
    psi=st.floats(min_value=-3.0, max_value=3.0),
    u=st.floats(min_value=-0.4, max_value=0.4),
    v=st.floats(min_value=-0.4, max_value=0.4),
)
def test_chart_rotation_gauge_invariance(psi, u, v):
    """Rotating the parameter chart leaves the geometric scalars alone."""
    c, s = math.cos(psi), math.sin(psi)
    base = point_geometry(GRAPH, (c * u - s * v, s * u + c * v))
    rot = point_geometry(rotated_graph(psi), (u, v))
    assert abs(base.gauss_K - rot.gauss_K) < 1e-9
    assert abs(abs(base.normal_K_indicator) - abs(rot.normal_K_indicator)) < 1e-9
    assert abs(np.linalg.norm(base.H) - np.linalg.norm(rot.H)) < 1e-9
    bb = base.B @ base.B + base.C @ base.C
    rr = rot.B @ rot.B + rot.C @ rot.C
    assert abs(bb - rr) < 1e-9
    assert classify(base).kind == classify(rot).kind


@settings(max_examples=25, deadline=None)
@given(
    psi=st.floats(min_value=-3.0, max_value=3.0),
    u=st.floats(min_value=0.0, max_value=6.0),
    v=st.floats(min_value=0.0, max_value=6.0),
)
def test_ambient_rotation_gauge_invariance(psi, u, v):
    """Rotating the ambient (x3,x4) plane is an isometry of R4."""
    c, s = math.cos(psi), math.sin(psi)
    spun = expression_surface(
        (
            "2*cos(u)",
            "sin(u)",
            f"{c!r}*(3*cos(v)) - {s!r}*sin(v)",
            f"{s!r}*(3*cos(v)) + {c!r}*sin(v)",
        ),
        ELL_PROD.domain,
    )
    base = point_geometry(ELL_PROD, (u, v))
    rot = point_geometry(spun, (u, v))
    assert abs(base.gauss_K - rot.gauss_K) < 1e-9
    assert abs(np.linalg.norm(base.H) - np.linalg.norm(rot.H)) < 1e-9
    assert classify(base).kind == classify(rot).kind


# --- errors and utilities -------------------------------------------------------

def test_not_an_immersion():
    degen = expression_surface(("u", "0", "0", "0"), (-1, 1, -1, 1))
    with pytest.raises(NotImmersionError, match="not an immersion at point"):
        point_geometry(degen, (0.0, 0.0))


def test_grid_masks_degenerate_lanes():
    # v-independent surface: every lane rank 1, nothing immersed, no NaNs
    degen = expression_surface(("u", "sin(u)", "0", "0"), (-1, 1, -1, 1))
    g = Grid.regular(degen.domain, 8, 8)
    gg = grid_geometry(degen, g)
    assert not gg.immersed.any()
    assert np.all(np.isfinite(gg.t1))


def test_jacobian_rank_codes():
    g = Grid.regular(CLIFFORD.domain, 8, 8)
    gg = grid_geometry(CLIFFORD, g)
    assert np.all(jacobian_rank(gg.jac, 1e-8) == 2)
    assert np.all(jacobian_rank(np.zeros((5, 4, 2)), 1e-8) == 0)
    one = np.zeros((4, 2))
    one[0, 0] = 1.0
    assert jacobian_rank(one, 1e-8) == 1


def test_classify_grid_matches_scalar():
    g = Grid.regular(GRAPH.domain, 9, 9)
    gg = grid_geometry(GRAPH, g)
    kinds, dist = classify_grid(gg)
    for i, j in [(0, 0), (4, 4), (8, 3)]:
        pg = point_geometry(GRAPH, (float(g.us[i]), float(g.vs[j])))
        assert KIND_NAMES[kinds[i, j]] == classify(pg).kind


def test_tolerances_validation():
    with pytest.raises(ValueError):
        Tolerances(frame_tol=0.0)
    t = Tolerances().replaced(fd_flatness_tol=1e-3)
    assert t.fd_flatness_tol == 1e-3
    assert t.frame_tol == 1e-10
