import numpy as np

from surf4.geometry import Tolerances, grid_geometry
from surf4.sections import (
    AnalyticSource, build_flat_chart, chart_field_derivatives, compute_e,
    e_completion_jets,
)
from surf4.surfaces import Grid, PlaneCurve, eval_surface, product_surface

tol = Tolerances()
ELL = product_surface(
    PlaneCurve("ellipse", a=2.0, b=1.0),
    PlaneCurve("ellipse", a=3.0, b=1.0),
)

for n in (48, 64):
    grid = Grid.regular(ELL.domain, n, n)
    gg = grid_geometry(ELL, grid, tol)
    src = AnalyticSource(ELL)
    chart = build_flat_chart(src, grid, base=(0.0, 0.0), tol=tol, gg=gg,
                             check_holonomy=False)
    e = compute_e(chart, gg)

    dw_u, dw_v = chart_field_derivatives(chart, src)

    t1, t2 = gg.t1, gg.t2
    def tangential(x):
        return (np.sum(x * t1, axis=-1, keepdims=True) * t1
                + np.sum(x * t2, axis=-1, keepdims=True) * t2)
    res_u = tangential(dw_u) - gg.jac[..., 0]
    res_v = tangential(dw_v) - gg.jac[..., 1]
    err = np.maximum(np.linalg.norm(res_u, axis=-1), np.linalg.norm(res_v, axis=-1))
    print(n, "e defining eq (continued):", np.max(err))

    # completion jets against continued derivatives
    U, V = grid.meshes()
    x4 = eval_surface(ELL, (U, V), 4)
    e_amb, _ = e_completion_jets(x4, e.values, order=2)
    an_du = np.stack([j.du().value for j in e_amb], axis=-1)
    an_dv = np.stack([j.dv().value for j in e_amb], axis=-1)
    print(n, "completion du vs continued:", np.max(np.linalg.norm(an_du - dw_u, axis=-1)),
          "dv:", np.max(np.linalg.norm(an_dv - dw_v, axis=-1)))
