"""End-to-end CLI behaviour: exit codes, artifacts, overrides, roundtrips."""

import csv
import json
import os

import numpy as np
import pytest

from surf4.cli import ConfigError, load_config, main
from surf4.geometry import KIND_NAMES, Grid, Tolerances, classify_grid, normal_degeneracy
from surf4.sections import make_source
from surf4.surfaces import sampled_from_mesh_csv

CLIFF = {"kind": "product",
         "curve1": {"kind": "circle", "r": 1.0},
         "curve2": {"kind": "circle", "r": 1.0}}
ELL = {"kind": "product",
       "curve1": {"kind": "ellipse", "a": 2.0, "b": 1.0},
       "curve2": {"kind": "ellipse", "a": 3.0, "b": 1.0}}


def write_config(path, **kw):
    with open(path, "w") as fh:
        json.dump(kw, fh)
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def cliff_run(tmp_path_factory):
    """One Clifford evolute run shared by the artifact tests."""
    d = tmp_path_factory.mktemp("cliff")
    cfg = write_config(d / "cfg.json", surface=CLIFF,
                       grid={"nu": 32, "nv": 32},
                       base_point=[np.pi, np.pi],
                       pipeline=[{"kind": "evolute"}],
                       outputs=str(d / "out"))
    code = main(["run", cfg])
    return code, d / "out"


@pytest.fixture(scope="module")
def ell_run(tmp_path_factory):
    """ELL two-orthogonal run at the (0, 0) gauge: conclusive permutability."""
    d = tmp_path_factory.mktemp("ell")
    cfg = write_config(d / "cfg.json", surface=ELL,
                       grid={"nu": 32, "nv": 32},
                       base_point=[0.0, 0.0],
                       pipeline=[{"kind": "orthogonal", "t": 0.3},
                                 {"kind": "orthogonal", "t": 0.7}],
                       outputs=str(d / "out"))
    code = main(["run", cfg])
    return code, d / "out"


def test_clifford_run_exit_zero(cliff_run):
    code, out = cliff_run
    assert code == 0
    for name in ("mesh_0.csv", "mesh_1.csv", "diag_0.csv", "diag_1.csv",
                 "report.json"):
        assert (out / name).exists()


def test_clifford_evolute_mesh_rank_zero(cliff_run):
    _, out = cliff_run
    rows = read_csv(out / "mesh_1.csv")
    assert len(rows) == 32 * 32
    assert list(rows[0]) == ["u", "v", "x1", "x2", "x3", "x4", "rank"]
    assert {r["rank"] for r in rows} == {"0"}
    xs = np.array([[float(r[f"x{i}"]) for i in range(1, 5)] for r in rows])
    assert np.ptp(xs, axis=0).max() < 1e-12


def test_clifford_report_notes_degenerate_image(cliff_run):
    _, out = cliff_run
    doc = json.loads((out / "report.json").read_text())
    checks = {c["name"]: c for c in doc["checks"]}
    assert checks["rank_map_consistency"]["status"] == "pass"
    assert checks["image_flatness_1"]["status"] == "inconclusive"
    assert checks["image_flatness_1"]["nodes_checked"] == 0
    assert doc["header"]["pipeline"] == [{"kind": "evolute"}]


def test_report_floats_roundtrip(cliff_run):
    _, out = cliff_run
    text = (out / "report.json").read_text()
    doc = json.loads(text)
    for c in doc["checks"]:
        assert isinstance(c["max_error"], float)
    # serialization is deterministic for identical documents
    from surf4.verify import dumps_document
    frag = dumps_document(doc)
    assert json.loads(frag) == doc


def test_ell_two_stage_exit_zero_with_permutability(ell_run):
    code, out = ell_run
    assert code == 0
    doc = json.loads((out / "report.json").read_text())
    checks = {c["name"]: c for c in doc["checks"]}
    assert checks["permutability"]["status"] == "pass"
    assert checks["permutability"]["max_error"] < 1e-10
    assert (out / "mesh_2.csv").exists()
    assert (out / "diag_2.csv").exists()


def test_mesh_roundtrip_reproduces_diag(ell_run):
    _, out = ell_run
    spec = sampled_from_mesh_csv(out / "mesh_1.csv")
    grid = Grid.regular(spec.domain, 32, 32)
    tol = Tolerances()
    gg = make_source(spec).node_geometry(grid, tol)
    kinds, _ = classify_grid(gg, tol)
    names = np.array(KIND_NAMES)[kinds]

    rows = read_csv(out / "diag_1.csv")
    K_ref = np.array([float(r["gauss_K"]) for r in rows]).reshape(32, 32)
    nd_ref = np.array([float(r["normal_degeneracy"]) for r in rows]).reshape(32, 32)
    cls_ref = np.array([r["class"] for r in rows]).reshape(32, 32)
    imm_ref = np.array([int(r["immersed"]) for r in rows], bool).reshape(32, 32)

    both = gg.immersed & imm_ref
    assert both.sum() > 400
    assert np.max(np.abs(gg.gauss_K - K_ref)[both]) < 1e-4
    assert np.max(np.abs(normal_degeneracy(gg) - nd_ref)[both]) < 1e-4
    assert (names == cls_ref)[both].all()


def test_grid_too_small_exit_two(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", surface=CLIFF,
                       grid={"nu": 4, "nv": 4})
    assert main(["run", cfg]) == 2
    assert "grid too small" in capsys.readouterr().err


def test_unknown_stage_exit_two(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", surface=CLIFF,
                       pipeline=[{"kind": "frobnicate"}])
    assert main(["run", cfg]) == 2
    assert "unknown pipeline stage 'frobnicate'" in capsys.readouterr().err


def test_unreadable_config_exit_two(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_nonflat_surface_gated_exit_two(tmp_path, capsys):
    bump = {"kind": "expression",
            "components": ["u", "v", "0.5*u*u + 0.3*v*v", "0.2*u*v"],
            "domain": [-1.0, 1.0, -1.0, 1.0]}
    cfg = write_config(tmp_path / "cfg.json", surface=bump,
                       grid={"nu": 16, "nv": 16},
                       pipeline=[{"kind": "orthogonal", "t": 0.5}])
    assert main(["run", cfg]) == 2
    err = capsys.readouterr().err
    assert "not tangent-flat" in err and "flat tangent bundle" in err


def test_failed_check_exit_one(tmp_path):
    # an impossible per-check tolerance turns a conclusive pass into a fail
    cfg = write_config(tmp_path / "cfg.json", surface=CLIFF,
                       grid={"nu": 16, "nv": 16},
                       tolerances={"frame_orthonormality": 1e-30})
    assert main(["check", cfg]) == 1


def test_check_writes_nothing(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "cfg.json", surface=CLIFF,
                       grid={"nu": 16, "nv": 16})
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    assert main(["check", cfg]) == 0
    assert list(work.iterdir()) == []


def test_classify_counts(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", surface=CLIFF,
                       grid={"nu": 16, "nv": 16},
                       outputs=str(tmp_path / "out"), emit=["diagnostics"])
    assert main(["classify", cfg]) == 0
    text = capsys.readouterr().out
    assert "semiumbilic_regular: 256" in text
    assert (tmp_path / "out" / "diag_0.csv").exists()


def test_surface_given_as_path(tmp_path):
    with open(tmp_path / "surf.json", "w") as fh:
        json.dump(CLIFF, fh)
    cfg = write_config(tmp_path / "cfg.json", surface="surf.json",
                       grid={"nu": 16, "nv": 16})
    loaded = load_config(cfg)
    assert loaded.surface.kind == "product"


def test_grid_and_gauge_flags(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", surface=CLIFF,
                       grid={"nu": 32, "nv": 32},
                       outputs=str(tmp_path / "out"), emit=["mesh"])
    assert main(["run", cfg, "--grid", "12x12", "--seed-gauge", "3.0,3.0"]) == 0
    rows = read_csv(tmp_path / "out" / "mesh_0.csv")
    assert len(rows) == 144


def test_bad_grid_flag_exit_two(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", surface=CLIFF)
    assert main(["run", cfg, "--grid", "banana"]) == 2
    assert "bad --grid" in capsys.readouterr().err


def test_emit_subset_respected(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", surface=CLIFF,
                       grid={"nu": 16, "nv": 16},
                       outputs=str(tmp_path / "out"), emit=["report"])
    assert main(["run", cfg]) == 0
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["report.json"]


def test_unknown_config_key_exit_two(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", surface=CLIFF, shenanigans=True)
    assert main(["run", cfg]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_unknown_tolerance_rejected(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", surface=CLIFF,
                       tolerances={"not_a_tolerance": 1.0})
    with pytest.raises(ConfigError):
        load_config(cfg)


def test_pipeline_cap(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", surface=CLIFF,
                       pipeline=[{"kind": "evolute"}] * 5)
    with pytest.raises(ConfigError, match="at most 4"):
        load_config(cfg)
