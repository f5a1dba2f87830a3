"""Per-point differential geometry of immersions into R4.

Frames come from Gram-Schmidt: tangent frame on (x_u, x_v), normal frame
seeded from the coordinate axis with the largest residual after tangent
projection, completed by the Hodge-type cross product so that
det[t1, t2, n1, n2] = +1.  The second fundamental form is the normal
projection of the chart second derivatives; the curvature ellipse data
(H, B, C) is reported in the tangent frame rotated so that B.C = 0 and
|B| >= |C| ("aligned").  The rotation angle is ill conditioned when the
ellipse is a near circle; such points keep the unrotated frame and carry
aligned=False.

The frame pipeline is written generically over the component type: plain
ndarrays give batched per-node values, Jet2 components give the same
quantities together with their derivatives (used to differentiate derived
sections without finite differences).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .jets import Jet2, jets_where
from .surfaces import Grid, SpecError, SurfaceSpec, eval_surface, grid_jets

__all__ = [
    "Tolerances",
    "NotImmersionError",
    "PointGeometry",
    "Classification",
    "GridGeometry",
    "KIND_NAMES",
    "geometry_from_jets",
    "grid_geometry",
    "point_geometry",
    "classify",
    "classify_grid",
    "eta_of_theta",
    "gauss_curvature",
    "normal_degeneracy",
    "jacobian_rank",
]

KIND_NAMES = ("umbilic", "semiumbilic_regular", "inflection", "nondegenerate")
UMBILIC, SEMIUMBILIC, INFLECTION, NONDEGENERATE = range(4)

# relative threshold below which the ellipse counts as a near circle and the
# alignment rotation is skipped
_ALIGN_REL = 1e-10


class NotImmersionError(ValueError):
    pass


@dataclass(frozen=True)
class Tolerances:
    frame_tol: float = 1e-10
    degeneracy_tol: float = 1e-7
    flatness_tol: float = 1e-6
    fd_flatness_tol: float = 1e-4
    rank_tol: float = 1e-8

    def __post_init__(self) -> None:
        for name in self.__dataclass_fields__:
            if not getattr(self, name) > 0:
                raise ValueError(f"tolerance {name} must be positive")

    def replaced(self, **kw) -> "Tolerances":
        vals = {name: getattr(self, name) for name in self.__dataclass_fields__}
        vals.update(kw)
        return Tolerances(**vals)


# --- generic ring helpers (work for ndarray and Jet2 components) -------------

def _sqrt(x):
    return x.sqrt() if isinstance(x, Jet2) else np.sqrt(x)


def _dot(a, b):
    acc = a[0] * b[0]
    for x, y in zip(a[1:], b[1:]):
        acc = acc + x * y
    return acc


def _axpy(alpha, x, y):
    # y - alpha*x componentwise
    return [yi - alpha * xi for xi, yi in zip(x, y)]


def _scale(alpha, x):
    return [alpha * xi for xi in x]


def _det3(m):
    return (
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    )


def _hodge_complement(t1, t2, n1):
    """w with w.x = det[t1, t2, n1, x] for all x; unit if inputs orthonormal."""
    cols = [t1, t2, n1]
    w = []
    for d in range(4):
        keep = [r for r in range(4) if r != d]
        minor = [[cols[c][r] for c in range(3)] for r in keep]
        det = _det3(minor)
        w.append(det if (d % 2 == 1) else -det)
    return w


def frame_pipeline(x, xu, xv, xuu, xuv, xvv, seed):
    """Gram-Schmidt frames and second-form data from derivative components.

    Each of x, xu, ... is a length-4 list of ring elements; seed is a length-4
    list of {0,1}-valued ring elements picking the n1 seed axis per lane.
    Returns a dict of ring elements / lists.
    """
    guu = _dot(xu, xu)
    guv = _dot(xu, xv)
    gvv = _dot(xv, xv)

    inv_nu = 1.0 / _sqrt(guu)
    t1 = _scale(inv_nu, xu)
    w2 = _axpy(_dot(xv, t1), t1, xv)
    inv_n2 = 1.0 / _sqrt(_dot(w2, w2))
    t2 = _scale(inv_n2, w2)

    wn = _axpy(_dot(seed, t2), t2, _axpy(_dot(seed, t1), t1, seed))
    n1 = _scale(1.0 / _sqrt(_dot(wn, wn)), wn)
    wc = _hodge_complement(t1, t2, n1)
    n2 = _scale(1.0 / _sqrt(_dot(wc, wc)), wc)

    def normal_part(vec):
        return _axpy(_dot(vec, t2), t2, _axpy(_dot(vec, t1), t1, vec))

    auu = normal_part(xuu)
    auv = normal_part(xuv)
    avv = normal_part(xvv)

    # unit-frame coefficients: t1 = p du, t2 = qu du + qv dv
    p = inv_nu
    qv = inv_n2
    qu = -(guv * inv_nu * inv_nu) * qv

    p2 = p * p
    b1 = _scale(p2, auu)
    b3 = [p * (qu * a + qv * c) for a, c in zip(auu, auv)]
    b2 = [qu * qu * a + 2.0 * (qu * qv) * c + qv * qv * e for a, c, e in zip(auu, auv, avv)]

    def in_normal_coords(vec):
        return (_dot(vec, n1), _dot(vec, n2))

    return {
        "g": (guu, guv, gvv),
        "t1": t1,
        "t2": t2,
        "n1": n1,
        "n2": n2,
        "alpha_uu": auu,
        "alpha_uv": auv,
        "alpha_vv": avv,
        "b1": in_normal_coords(b1),
        "b2": in_normal_coords(b2),
        "b3": in_normal_coords(b3),
        "frame_coeffs": (p, qu, qv),
    }


# --- batched value-level geometry --------------------------------------------

@dataclass(eq=False)
class GridGeometry:
    """Per-node geometry over a batch of lanes (usually a grid)."""

    point: np.ndarray  # (..., 4)
    jac: np.ndarray  # (..., 4, 2)
    hess: np.ndarray  # (..., 4, 3)  second derivs: uu, uv, vv
    g: np.ndarray  # (..., 2, 2)
    ginv: np.ndarray
    sigma_min: np.ndarray  # smallest singular value of jac
    t1: np.ndarray  # (..., 4) aligned tangent frame
    t2: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    alpha_uu: np.ndarray  # (..., 4) ambient normal-valued second form, chart basis
    alpha_uv: np.ndarray
    alpha_vv: np.ndarray
    b1: np.ndarray  # (..., 2) normal coordinates, aligned frame
    b2: np.ndarray
    b3: np.ndarray
    H: np.ndarray
    B: np.ndarray
    C: np.ndarray
    gauss_K: np.ndarray
    normal_K: np.ndarray  # signed degeneracy indicator B.JC
    phi: np.ndarray  # alignment rotation applied to the tangent frame
    aligned: np.ndarray  # bool; False where the ellipse is a near circle
    immersed: np.ndarray  # bool

    @property
    def batch_shape(self):
        return self.point.shape[:-1]


def _dummy_plane_jets(order, batch_shape):
    zero = Jet2.constant(np.zeros(batch_shape), order)
    return (
        Jet2.variable(np.zeros(batch_shape), 0, order),
        Jet2.variable(np.zeros(batch_shape), 1, order),
        zero,
        Jet2(order, zero.coeffs.copy()),
    )


def sanitize_jets(jets, good):
    """Replace non-immersed lanes by a plane so risky jet ops stay defined."""
    dummy = _dummy_plane_jets(jets[0].order, jets[0].value.shape)
    return tuple(jets_where(good, j, d) for j, d in zip(jets, dummy))


def immersion_mask(jets, rank_tol):
    """Lanes where dx has two singular values above rank_tol."""
    xu = [j.du().value for j in jets]
    xv = [j.dv().value for j in jets]
    guu = sum(a * a for a in xu)
    guv = sum(a * b for a, b in zip(xu, xv))
    gvv = sum(b * b for b in xv)
    mean = 0.5 * (guu + gvv)
    spread = np.sqrt((0.5 * (guu - gvv)) ** 2 + guv**2)
    lam_min = np.maximum(mean - spread, 0.0)
    sigma_min = np.sqrt(lam_min)
    return sigma_min > rank_tol, sigma_min


def _seed_one_hot(t1, t2):
    """Axis with the largest residual after tangent projection, per lane."""
    resid = 1.0 - t1**2 - t2**2  # |e_a - (e_a.t1)t1 - (e_a.t2)t2|^2 per axis
    choice = np.argmax(resid, axis=-1)
    return np.eye(4)[choice]


def geometry_from_jets(jets, tol: Tolerances = Tolerances()) -> GridGeometry:
    """Value-level geometry for a batch of order>=2 surface jets."""
    if any(j.order < 2 for j in jets):
        raise ValueError("geometry needs jets of order >= 2")
    good, sigma_min = immersion_mask(jets, tol.rank_tol)
    jets = sanitize_jets(jets, good)

    point = np.stack([j.value for j in jets], axis=-1)
    xu = [j.du().value for j in jets]
    xv = [j.dv().value for j in jets]
    xuu = [2.0 * j.coeff(2, 0) for j in jets]
    xuv = [j.coeff(1, 1) for j in jets]
    xvv = [2.0 * j.coeff(0, 2) for j in jets]

    t1v = np.stack(xu, axis=-1)
    norm = np.linalg.norm(t1v, axis=-1, keepdims=True)
    t1_pre = t1v / norm
    t2v = np.stack(xv, axis=-1)
    t2v = t2v - np.sum(t2v * t1_pre, axis=-1, keepdims=True) * t1_pre
    t2_pre = t2v / np.linalg.norm(t2v, axis=-1, keepdims=True)
    seed_arr = _seed_one_hot(t1_pre, t2_pre)
    seed = [seed_arr[..., a] for a in range(4)]

    x = [point[..., a] for a in range(4)]
    data = frame_pipeline(x, xu, xv, xuu, xuv, xvv, seed)

    guu, guv, gvv = data["g"]
    g = np.stack(
        [np.stack([guu, guv], axis=-1), np.stack([guv, gvv], axis=-1)], axis=-2
    )
    det = guu * gvv - guv * guv
    ginv = (
        np.stack([np.stack([gvv, -guv], axis=-1), np.stack([-guv, guu], axis=-1)], axis=-2)
        / det[..., None, None]
    )

    def vec4(lst):
        return np.stack(lst, axis=-1)

    def vec2(pair):
        return np.stack(pair, axis=-1)

    t1, t2, n1, n2 = vec4(data["t1"]), vec4(data["t2"]), vec4(data["n1"]), vec4(data["n2"])
    b1, b2, b3 = vec2(data["b1"]), vec2(data["b2"]), vec2(data["b3"])

    H = 0.5 * (b1 + b2)
    B = 0.5 * (b1 - b2)
    C = b3

    # align the tangent frame so the ellipse axes match (B.C = 0, |B| >= |C|)
    beta = np.sum(B * B, axis=-1) - np.sum(C * C, axis=-1)
    gamma = 2.0 * np.sum(B * C, axis=-1)
    rho = np.hypot(beta, gamma)
    scale = np.sum(B * B, axis=-1) + np.sum(C * C, axis=-1)
    aligned = rho > _ALIGN_REL * scale
    phi = np.where(aligned, 0.25 * np.arctan2(gamma, beta), 0.0)
    c2, s2 = np.cos(2 * phi)[..., None], np.sin(2 * phi)[..., None]
    c1, s1 = np.cos(phi)[..., None], np.sin(phi)[..., None]
    B_al = B * c2 + C * s2
    C_al = -B * s2 + C * c2
    t1_al = c1 * t1 + s1 * t2
    t2_al = -s1 * t1 + c1 * t2
    b1_al = H + B_al
    b2_al = H - B_al

    gauss_K = np.sum(H * H, axis=-1) - np.sum(B * B, axis=-1) - np.sum(C * C, axis=-1)
    # J rotates n1 to n2: J(a, b) = (-b, a)
    normal_K = B_al[..., 1] * C_al[..., 0] - B_al[..., 0] * C_al[..., 1]

    jac = np.stack([np.stack(xu, axis=-1), np.stack(xv, axis=-1)], axis=-1)
    hess = np.stack([np.stack(v, axis=-1) for v in (xuu, xuv, xvv)], axis=-1)

    return GridGeometry(
        point=point,
        jac=jac,
        hess=hess,
        g=g,
        ginv=ginv,
        sigma_min=sigma_min,
        t1=t1_al,
        t2=t2_al,
        n1=n1,
        n2=n2,
        alpha_uu=vec4(data["alpha_uu"]),
        alpha_uv=vec4(data["alpha_uv"]),
        alpha_vv=vec4(data["alpha_vv"]),
        b1=b1_al,
        b2=b2_al,
        b3=C_al,
        H=H,
        B=B_al,
        C=C_al,
        gauss_K=gauss_K,
        normal_K=normal_K,
        phi=phi,
        aligned=aligned,
        immersed=good,
    )


def grid_geometry(
    spec: SurfaceSpec,
    grid: Grid,
    tol: Tolerances = Tolerances(),
    fd_levels: int = 3,
) -> GridGeometry:
    """Geometry at every grid node; sampled specs go through stride FD."""
    if spec.analytic:
        U, V = grid.meshes()
        jets = eval_surface(spec, (U, V), 4)
        return geometry_from_jets(jets, tol)
    data = spec.samples
    same_lattice = (
        data.us.size == grid.nu
        and data.vs.size == grid.nv
        and np.allclose(data.us, grid.us, rtol=0, atol=1e-12 * max(1.0, grid.du))
        and np.allclose(data.vs, grid.vs, rtol=0, atol=1e-12 * max(1.0, grid.dv))
    )
    if same_lattice:
        points = data.points
        valid = data.valid
    else:
        U, V = grid.meshes()
        points = data.point(U, V)
        valid = np.ones(grid.shape, dtype=bool)
    jets, stencil_ok = grid_jets(points, grid.du, grid.dv, order=2, levels=fd_levels)
    gg = geometry_from_jets(jets, tol)
    gg.immersed &= stencil_ok & valid
    return gg


# --- scalar wrappers ----------------------------------------------------------

@dataclass(frozen=True)
class PointGeometry:
    point: np.ndarray
    jacobian: np.ndarray  # (4, 2)
    g: np.ndarray  # (2, 2)
    t1: np.ndarray
    t2: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    b1: np.ndarray  # Vec2 in (n1, n2), aligned frame
    b2: np.ndarray
    b3: np.ndarray
    H: np.ndarray
    B: np.ndarray
    C: np.ndarray
    gauss_K: float
    normal_K_indicator: float
    aligned: bool


@dataclass(frozen=True)
class Classification:
    kind: str
    asymptotic_angles: tuple[float, ...]
    ellipse_line_distance: float


def _pick(gg: GridGeometry, idx=()) -> PointGeometry:
    return PointGeometry(
        point=gg.point[idx],
        jacobian=gg.jac[idx],
        g=gg.g[idx],
        t1=gg.t1[idx],
        t2=gg.t2[idx],
        n1=gg.n1[idx],
        n2=gg.n2[idx],
        b1=gg.b1[idx],
        b2=gg.b2[idx],
        b3=gg.b3[idx],
        H=gg.H[idx],
        B=gg.B[idx],
        C=gg.C[idx],
        gauss_K=float(gg.gauss_K[idx]),
        normal_K_indicator=float(gg.normal_K[idx]),
        aligned=bool(gg.aligned[idx]),
    )


def point_geometry(spec: SurfaceSpec, at, tol: Tolerances = Tolerances()) -> PointGeometry:
    if spec.analytic:
        jets = eval_surface(spec, at, 4)
    else:
        jets = eval_surface(spec, at, 2)
    good, _ = immersion_mask(jets, tol.rank_tol)
    if not bool(good):
        raise NotImmersionError(f"not an immersion at point {tuple(float(x) for x in at)}")
    gg = geometry_from_jets(jets, tol)
    return _pick(gg)


def classify_grid(gg: GridGeometry, tol: Tolerances = Tolerances()):
    """Vectorized classification: (kind codes, ellipse line distance)."""
    nB = np.linalg.norm(gg.B, axis=-1)
    nC = np.linalg.norm(gg.C, axis=-1)
    nH = np.linalg.norm(gg.H, axis=-1)
    umb = (nB < tol.degeneracy_tol) & (nC < tol.degeneracy_tol)
    semi = nC < tol.degeneracy_tol

    with np.errstate(invalid="ignore", divide="ignore"):
        bhat = gg.B / np.where(nB > 0, nB, 1.0)[..., None]
        along = np.sum(gg.H * bhat, axis=-1, keepdims=True)
        dist_line = np.linalg.norm(gg.H - along * bhat, axis=-1)
    dist = np.where(umb, nH, dist_line)
    infl = semi & ~umb & (dist < tol.degeneracy_tol * (1.0 + nH))

    kinds = np.full(gg.gauss_K.shape, NONDEGENERATE, dtype=np.int8)
    kinds[semi] = SEMIUMBILIC
    kinds[infl] = INFLECTION
    kinds[umb] = UMBILIC
    line_distance = np.where(semi, dist, np.nan)
    return kinds, line_distance


def classify(pg: PointGeometry, tol: Tolerances = Tolerances()) -> Classification:
    gg_like = GridGeometry(
        point=pg.point[None],
        jac=pg.jacobian[None],
        hess=np.zeros((1, 4, 3)),
        g=pg.g[None],
        ginv=np.zeros((1, 2, 2)),
        sigma_min=np.zeros(1),
        t1=pg.t1[None],
        t2=pg.t2[None],
        n1=pg.n1[None],
        n2=pg.n2[None],
        alpha_uu=np.zeros((1, 4)),
        alpha_uv=np.zeros((1, 4)),
        alpha_vv=np.zeros((1, 4)),
        b1=pg.b1[None],
        b2=pg.b2[None],
        b3=pg.b3[None],
        H=pg.H[None],
        B=pg.B[None],
        C=pg.C[None],
        gauss_K=np.array([pg.gauss_K]),
        normal_K=np.array([pg.normal_K_indicator]),
        phi=np.zeros(1),
        aligned=np.array([pg.aligned]),
        immersed=np.array([True]),
    )
    kinds, dist = classify_grid(gg_like, tol)
    kind = KIND_NAMES[int(kinds[0])]
    if kind in ("semiumbilic_regular", "inflection"):
        angles = (0.0, 0.5 * math.pi)
    else:
        angles = ()
    return Classification(kind, angles, float(dist[0]))


def eta_of_theta(pg, theta):
    """Curvature ellipse point in (n1, n2) coordinates at tangent angle theta."""
    theta = np.asarray(theta, dtype=float)
    return (
        pg.H
        + pg.B * np.cos(2 * theta)[..., None]
        + pg.C * np.sin(2 * theta)[..., None]
    )


def gauss_curvature(pg) -> float:
    return float(np.asarray(pg.gauss_K))


def normal_degeneracy(pg) -> float:
    if isinstance(pg, PointGeometry):
        return abs(pg.normal_K_indicator)
    return np.abs(pg.normal_K)


def jacobian_rank(jac, rank_tol: float):
    """Per-lane rank of (..., 4, 2) jacobians from singular values vs rank_tol."""
    g11 = np.sum(jac[..., 0] * jac[..., 0], axis=-1)
    g12 = np.sum(jac[..., 0] * jac[..., 1], axis=-1)
    g22 = np.sum(jac[..., 1] * jac[..., 1], axis=-1)
    mean = 0.5 * (g11 + g22)
    spread = np.sqrt((0.5 * (g11 - g22)) ** 2 + g12**2)
    lam_max = mean + spread
    lam_min = np.maximum(mean - spread, 0.0)
    t2 = rank_tol * rank_tol
    return (lam_max > t2).astype(np.int8) + (lam_min > t2).astype(np.int8)
