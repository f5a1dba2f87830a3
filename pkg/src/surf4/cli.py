"""Command line front end: one JSON config in, CSV and JSON artifacts out.

Exit codes: 0 when every conclusive check passes, 1 when any check fails,
2 for configuration and IO problems (unreadable config, unknown pipeline
stage, a non-flat surface fed to a stage that needs a flat bundle).
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields as dataclass_fields

import numpy as np

from .geometry import (
    KIND_NAMES,
    Grid,
    Tolerances,
    classify_grid,
    jacobian_rank,
    normal_degeneracy,
)
from .sections import make_source
from .surfaces import SpecError, SurfaceSpec, surface_from_json
from .transforms import TransformSpec
from .verify import (
    _CHECK_DEFAULTS,
    dumps_document,
    report_document,
    run_suite_full,
)

__all__ = ["ConfigError", "RunConfig", "load_config", "main"]

EMIT_CHOICES = ("mesh", "diagnostics", "report")

# bundles a stage needs flat on its input surface; evolute runs anywhere c does
_NEEDS_TANGENT_FLAT = {"envelope", "orthogonal", "parallel", "shift"}
_NEEDS_NORMAL_FLAT = {"parallel", "shift"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    surface: SurfaceSpec
    grid: Grid
    pipeline: list
    base_point: tuple | None = None
    tolerances: Tolerances = field(default_factory=Tolerances)
    check_tolerances: dict = field(default_factory=dict)
    outputs: str = "."
    emit: tuple = EMIT_CHOICES


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config '{path}': {exc}") from exc


def _parse_pipeline(raw):
    if not isinstance(raw, list):
        raise ConfigError("pipeline must be a list of stage objects")
    if len(raw) > 4:
        raise ConfigError("pipeline supports at most 4 stages")
    stages = []
    for i, obj in enumerate(raw, start=1):
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ConfigError(f"pipeline stage {i} must be an object with a 'kind'")
        kw = dict(obj)
        kind = kw.pop("kind")
        for key in ("gauge", "seed"):
            if key in kw and kw[key] is not None:
                kw[key] = tuple(float(x) for x in kw[key])
        try:
            stages.append(TransformSpec(kind, **kw))
        except ValueError as exc:
            if "unknown transform kind" in str(exc):
                raise ConfigError(f"unknown pipeline stage '{kind}'") from exc
            raise ConfigError(f"pipeline stage {i}: {exc}") from exc
        except TypeError as exc:
            raise ConfigError(f"pipeline stage {i}: {exc}") from exc
    return stages


def _split_tolerances(raw):
    if not isinstance(raw, dict):
        raise ConfigError("tolerances must be an object")
    base_names = {f.name for f in dataclass_fields(Tolerances)}
    base, checks = {}, {}
    for key, val in raw.items():
        if key in base_names:
            base[key] = float(val)
        elif key in _CHECK_DEFAULTS:
            checks[key] = float(val)
        else:
            raise ConfigError(f"unknown tolerance '{key}'")
    return Tolerances(**base), checks


def load_config(path) -> RunConfig:
    obj = _read_json(path)
    if not isinstance(obj, dict):
        raise ConfigError(f"cannot read config '{path}': top level must be an object")
    known = {"surface", "grid", "base_point", "pipeline", "tolerances",
             "outputs", "emit"}
    for key in obj:
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
    if "surface" not in obj:
        raise ConfigError("config needs a surface")

    raw_surface = obj["surface"]
    if isinstance(raw_surface, str):
        # a path is resolved relative to the config file
        sp = os.path.join(os.path.dirname(os.path.abspath(path)), raw_surface)
        raw_surface = _read_json(sp)
    try:
        spec = surface_from_json(raw_surface)
    except SpecError as exc:
        raise ConfigError(f"bad surface: {exc}") from exc

    gobj = obj.get("grid", {})
    nu = int(gobj.get("nu", 64))
    nv = int(gobj.get("nv", 64))
    if nu < 8 or nv < 8:
        raise ConfigError("grid too small: nu and nv must be at least 8")
    domain = tuple(float(x) for x in gobj.get("domain", spec.domain))
    grid = Grid.regular(domain, nu, nv)

    base = obj.get("base_point")
    if base is not None:
        base = (float(base[0]), float(base[1]))

    pipeline = _parse_pipeline(obj.get("pipeline", []))
    tol, check_tol = _split_tolerances(obj.get("tolerances", {}))

    emit = obj.get("emit", list(EMIT_CHOICES))
    if not isinstance(emit, list) or any(e not in EMIT_CHOICES for e in emit):
        raise ConfigError(f"emit must be a subset of {EMIT_CHOICES}")

    return RunConfig(spec, grid, pipeline, base_point=base, tolerances=tol,
                     check_tolerances=check_tol,
                     outputs=str(obj.get("outputs", ".")), emit=tuple(emit))


def _gate_first_stage(cfg: RunConfig):
    """Reject a non-flat surface fed to a stage that needs a flat bundle."""
    if not cfg.pipeline:
        return
    kind = cfg.pipeline[0].kind
    if kind not in _NEEDS_TANGENT_FLAT and kind not in _NEEDS_NORMAL_FLAT:
        return
    source = make_source(cfg.surface)
    gg = source.node_geometry(cfg.grid, cfg.tolerances)
    if not gg.immersed.any():
        raise ConfigError("surface has no immersed nodes on the run grid")
    flat_tol = (cfg.tolerances.flatness_tol if source.tier == "analytic"
                else cfg.tolerances.fd_flatness_tol)
    if kind in _NEEDS_TANGENT_FLAT:
        worst = float(np.max(np.abs(gg.gauss_K[gg.immersed])))
        if worst >= flat_tol:
            raise ConfigError(
                f"surface is not tangent-flat (max |K| = {worst:.3e}); "
                f"stage 1 '{kind}' needs a flat tangent bundle")
    if kind in _NEEDS_NORMAL_FLAT:
        worst = float(np.max(np.abs(gg.normal_K[gg.immersed])))
        if worst >= flat_tol:
            raise ConfigError(
                f"surface is not normal-flat (max normal curvature = {worst:.3e}); "
                f"stage 1 '{kind}' needs a flat normal bundle")


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_csv(path, header, columns):
    rows = len(columns[0])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in range(rows):
            fh.write(",".join(col[r] for col in columns) + "\n")


def _float_col(arr):
    flat = np.asarray(arr, dtype=float).ravel()
    return [_fmt(x) for x in flat]


def _int_col(arr):
    return [str(int(x)) for x in np.asarray(arr).ravel()]


def _mesh_columns(grid, points, rank):
    U, V = grid.meshes()
    cols = [_float_col(U), _float_col(V)]
    cols += [_float_col(points[..., c]) for c in range(4)]
    cols.append(_int_col(rank))
    return ["u", "v", "x1", "x2", "x3", "x4", "rank"], cols


def _field_norm(field_obj, shape):
    out = np.full(shape, np.nan)
    if field_obj is not None:
        norms = np.linalg.norm(field_obj.values, axis=-1)
        out[field_obj.mask] = norms[field_obj.mask]
    return out


def _diag_columns(grid, gg, c=None, e=None, j=None, masked=None):
    kinds, _ = classify_grid(gg)
    names = np.array(KIND_NAMES)[kinds]
    names = np.where(gg.immersed, names, "masked")
    U, V = grid.meshes()
    if masked is None:
        masked = ~gg.immersed
    header = ["u", "v", "class", "gauss_K", "normal_degeneracy",
              "c_norm", "e_norm", "j_norm", "masked", "immersed"]
    cols = [
        _float_col(U), _float_col(V), [str(s) for s in names.ravel()],
        _float_col(gg.gauss_K), _float_col(normal_degeneracy(gg)),
        _float_col(_field_norm(c, grid.shape)),
        _float_col(_field_norm(e, grid.shape)),
        _float_col(_field_norm(j, grid.shape)),
        _int_col(masked), _int_col(gg.immersed),
    ]
    return header, cols


def _write_artifacts(cfg, reports, fields, stages, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    written = []
    gg = fields.gg
    if "mesh" in cfg.emit:
        rank0 = jacobian_rank(gg.jac, cfg.tolerances.rank_tol)
        header, cols = _mesh_columns(cfg.grid, gg.point, rank0)
        path = os.path.join(out_dir, "mesh_0.csv")
        _write_csv(path, header, cols)
        written.append(path)
        for st in stages:
            if st.ts is None:
                continue
            header, cols = _mesh_columns(cfg.grid, st.ts.images, st.ts.rank_map)
            path = os.path.join(out_dir, f"mesh_{st.index}.csv")
            _write_csv(path, header, cols)
            written.append(path)
    if "diagnostics" in cfg.emit:
        header, cols = _diag_columns(cfg.grid, gg, fields.c, fields.e, fields.j)
        path = os.path.join(out_dir, "diag_0.csv")
        _write_csv(path, header, cols)
        written.append(path)
        for st in stages:
            if st.ts is None or st.igg is None:
                continue
            fin = st.fields_in
            header, cols = _diag_columns(
                cfg.grid, st.igg,
                c=fin.c if fin else None, e=fin.e if fin else None,
                j=fin.j if fin else None, masked=st.ts.masked)
            path = os.path.join(out_dir, f"diag_{st.index}.csv")
            _write_csv(path, header, cols)
            written.append(path)
    if "report" in cfg.emit:
        doc = report_document(reports, cfg.surface, cfg.grid, cfg.pipeline,
                              cfg.tolerances, notes=fields.notes)
        path = os.path.join(out_dir, "report.json")
        with open(path, "w") as fh:
            fh.write(dumps_document(doc))
            fh.write("\n")
        written.append(path)
    return written


def _print_reports(reports, out=sys.stdout):
    for r in reports:
        print(f"{r.name}: {r.status} (max {r.max_error:.3e}, tol "
              f"{r.tolerance:.1e}, checked {r.nodes_checked})", file=out)


def _exit_code(reports) -> int:
    return 1 if any(r.status == "fail" for r in reports) else 0


def _cmd_run(cfg: RunConfig) -> int:
    _gate_first_stage(cfg)
    reports, fields, stages = run_suite_full(
        cfg.surface, cfg.grid, cfg.pipeline, cfg.tolerances,
        base=cfg.base_point, check_tolerances=cfg.check_tolerances)
    for st in stages:
        if st.note:
            print(f"stage {st.index} ({st.tspec.kind}): {st.note}", file=sys.stderr)
    written = _write_artifacts(cfg, reports, fields, stages, cfg.outputs)
    _print_reports(reports)
    for path in written:
        print(f"wrote {path}")
    return _exit_code(reports)


def _cmd_check(cfg: RunConfig) -> int:
    _gate_first_stage(cfg)
    reports, _, stages = run_suite_full(
        cfg.surface, cfg.grid, cfg.pipeline, cfg.tolerances,
        base=cfg.base_point, check_tolerances=cfg.check_tolerances)
    for st in stages:
        if st.note:
            print(f"stage {st.index} ({st.tspec.kind}): {st.note}", file=sys.stderr)
    _print_reports(reports)
    return _exit_code(reports)


def _cmd_classify(cfg: RunConfig) -> int:
    source = make_source(cfg.surface)
    gg = source.node_geometry(cfg.grid, cfg.tolerances)
    kinds, _ = classify_grid(gg, cfg.tolerances)
    for code, name in enumerate(KIND_NAMES):
        n = int(np.sum((kinds == code) & gg.immersed))
        print(f"{name}: {n}")
    print(f"masked: {int(np.sum(~gg.immersed))}")
    if "diagnostics" in cfg.emit:
        os.makedirs(cfg.outputs, exist_ok=True)
        header, cols = _diag_columns(cfg.grid, gg)
        path = os.path.join(cfg.outputs, "diag_0.csv")
        _write_csv(path, header, cols)
        print(f"wrote {path}")
    return 0


def _parse_grid_flag(text):
    try:
        nu, nv = text.lower().split("x")
        return int(nu), int(nv)
    except ValueError as exc:
        raise ConfigError(f"bad --grid '{text}': expected NUxNV") from exc


def _parse_gauge_flag(text):
    try:
        u, v = text.split(",")
        return float(u), float(v)
    except ValueError as exc:
        raise ConfigError(f"bad --seed-gauge '{text}': expected U,V") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surf4")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run checks and write mesh/diag/report files")
    run_p.add_argument("config")
    run_p.add_argument("--out", help="output directory (overrides config)")
    run_p.add_argument("--grid", help="grid size as NUxNV (overrides config)")
    run_p.add_argument("--seed-gauge", dest="seed_gauge",
                       help="chart base point as U,V (overrides config)")

    check_p = sub.add_parser("check", help="run checks, write nothing")
    check_p.add_argument("config")

    cls_p = sub.add_parser("classify", help="classify grid nodes of the surface")
    cls_p.add_argument("config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            if args.out:
                cfg.outputs = args.out
            if args.grid:
                nu, nv = _parse_grid_flag(args.grid)
                if nu < 8 or nv < 8:
                    raise ConfigError("grid too small: nu and nv must be at least 8")
                cfg.grid = Grid.regular(
                    (cfg.grid.us[0], cfg.grid.us[-1], cfg.grid.vs[0], cfg.grid.vs[-1]),
                    nu, nv)
            if args.seed_gauge:
                cfg.base_point = _parse_gauge_flag(args.seed_gauge)
            return _cmd_run(cfg)
        if args.command == "check":
            return _cmd_check(cfg)
        return _cmd_classify(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
