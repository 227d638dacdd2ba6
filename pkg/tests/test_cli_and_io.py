import json
import os

import numpy as np
import pytest
import yaml

from gblrom.cli import main
from gblrom.config import ConfigError, config_from_dict, load_config, stage_seed
from gblrom.mesh import build_box_mesh
from gblrom.vtkio import write_vtk


MINI = {
    "seed": 3,
    "workers": 1,
    "mesh": {"kind": "box", "nx": 3, "ny": 3, "nz": 3, "extents": [10.0, 10.0, 10.0]},
    "tensors": {"motility": {"kind": "isotropic", "value": 1.0},
                "diffusivity": {"kind": "isotropic", "value": 50.0}},
    "initial": {"center": [5.0, 5.0, 5.0], "sharpness": 0.1,
                "amplitude": 2.0, "offset": -1.0, "oxygen": 1.0},
    "simulation": {"dt": 0.5, "n_steps": 3, "epsilon": 88.0, "record_every": 1},
    "pod": {"n_parameter_sets": 2, "ic": 0.95, "inner_product": "mass"},
    "direct": {"n_parameter_sets": 2, "epochs": 5, "hidden": [8], "test_fraction": 0.3},
    "inverse": {"gap_days": 1.0, "pairs_per_trajectory": 1, "epochs": 5,
                "hidden": [8], "test_fraction": 0.3},
    "heldout": {"n_patients": 1},
}


def _write_config(tmp_path, overrides=None):
    doc = json.loads(json.dumps(MINI))
    doc["out"] = str(tmp_path / "out")
    if overrides:
        for key, val in overrides.items():
            doc[key] = val
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def test_vtk_structure(tmp_path):
    mesh = build_box_mesh(1, 1, 1, [1.0, 1.0, 1.0])
    path = tmp_path / "out.vtk"
    write_vtk(path, mesh, {"phi": np.linspace(-1, 1, 8), "mu": np.zeros(8)})
    text = path.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    assert "ASCII" in text
    assert "DATASET UNSTRUCTURED_GRID" in text
    assert f"POINTS {mesh.n_vertices} double" in text
    assert f"CELLS {mesh.n_tets} {5 * mesh.n_tets}" in text
    assert text.count("10") >= mesh.n_tets
    assert f"POINT_DATA {mesh.n_vertices}" in text
    assert "SCALARS phi double 1" in text
    assert "SCALARS mu double 1" in text
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "bad.vtk", mesh, {"phi": np.zeros(3)})


def test_config_round_trip(tmp_path):
    path = _write_config(tmp_path)
    cfg = load_config(path)
    assert cfg.mesh.nx == 3
    assert cfg.simulation.n_steps == 3
    assert cfg.direct.hidden == (8,)
    again = config_from_dict(cfg.to_dict())
    assert again.config_hash() == cfg.config_hash()
    assert again.fom_hash() == cfg.fom_hash()


def test_config_validation_errors(tmp_path):
    with pytest.raises(ConfigError, match="workers"):
        config_from_dict({**MINI, "workers": 0})
    with pytest.raises(ConfigError, match="ic"):
        config_from_dict({**MINI, "pod": {"ic": 1.5}})
    with pytest.raises(ConfigError, match="gap"):
        bad = json.loads(json.dumps(MINI))
        bad["inverse"]["gap_days"] = 100.0
        config_from_dict(bad)
    with pytest.raises(ConfigError, match="path"):
        bad = json.loads(json.dumps(MINI))
        bad["mesh"] = {"kind": "file", "path": "nowhere.txt"}
        config_from_dict(bad)


def test_stage_seeds_are_stable_and_distinct():
    seeds = {name: stage_seed(42, name)
             for name in ("pod_sampling", "direct_sampling", "heldout_sampling")}
    assert len(set(seeds.values())) == 3
    assert stage_seed(42, "pod_sampling") == seeds["pod_sampling"]
    assert stage_seed(43, "pod_sampling") != seeds["pod_sampling"]


def test_cli_generate_mesh_and_simulate(tmp_path, capsys):
    path = _write_config(tmp_path)
    assert main(["generate-mesh", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert "64 vertices" in out
    mesh_file = tmp_path / "out" / "mesh" / "mesh.txt"
    assert mesh_file.is_file()
    manifest = json.loads((tmp_path / "out" / "mesh" / "manifest.json").read_text())
    assert manifest["command"] == "generate-mesh"
    assert "config_hash" in manifest and "wall_time_s" in manifest

    assert main(["simulate", "--config", str(path)]) == 0
    sim_dir = tmp_path / "out" / "simulate"
    diag = (sim_dir / "diagnostics.csv").read_text().splitlines()
    assert diag[0] == "time,free_energy,total_mass,tumor_volume"
    assert len(diag) == 4 + 1  # header + 4 recorded states
    assert (sim_dir / "phi_0000.txt").is_file()
    assert (sim_dir / "state_0003.vtk").is_file()

    # first diagnostics row reports the volume of the initial condition
    from gblrom.fields import load_nodal_field
    from gblrom.fom import assemble_operators, tumor_volume
    from gblrom.fields import isotropic_field
    from gblrom.mesh import load_mesh
    mesh = load_mesh(mesh_file)
    ops = assemble_operators(mesh, isotropic_field(mesh, 1.0, "T"),
                             isotropic_field(mesh, 50.0, "D"))
    phi0 = load_nodal_field(sim_dir / "phi_0000.txt", mesh)
    first_row = [float(v) for v in diag[1].split(",")]
    assert first_row[3] == pytest.approx(tumor_volume(phi0, ops), rel=1e-12)


def test_cli_simulate_is_idempotent(tmp_path):
    path = _write_config(tmp_path)
    assert main(["simulate", "--config", str(path)]) == 0
    diag = tmp_path / "out" / "simulate" / "diagnostics.csv"
    vtk = tmp_path / "out" / "simulate" / "state_0001.vtk"
    first = diag.read_bytes()
    first_vtk = vtk.read_bytes()
    assert main(["simulate", "--config", str(path)]) == 0
    assert diag.read_bytes() == first
    assert vtk.read_bytes() == first_vtk


def test_cli_missing_artifact_fails_fast(tmp_path, capsys):
    path = _write_config(tmp_path)
    code = main(["train-direct", "--config", str(path)])
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("gbl-rom: error: missing-artifact:")
    assert "\n" not in err.strip()


def test_cli_rejects_bad_params(tmp_path, capsys):
    path = _write_config(tmp_path)
    code = main(["simulate", "--config", str(path), "--params", "nu=0.1,bogus=3"])
    assert code == 1
    assert "invalid-input" in capsys.readouterr().err


def test_cli_seed_and_out_overrides(tmp_path):
    path = _write_config(tmp_path)
    alt = tmp_path / "elsewhere"
    assert main(["generate-mesh", "--config", str(path), "--seed", "99",
                 "--out", str(alt)]) == 0
    manifest = json.loads((alt / "mesh" / "manifest.json").read_text())
    assert manifest["seed"] == 99


def test_cli_strict_ranges_rejects_out_of_range(tmp_path, capsys):
    path = _write_config(tmp_path, overrides={
        "nominal": {"nu": 5.0, "m0": 3860.7, "kappa": 700.4, "delta": 0.24,
                    "delta_n": 21041.0, "s_n": 41978.0}})
    code = main(["simulate", "--config", str(path), "--strict-ranges"])
    assert code == 1
    assert "invalid-input" in capsys.readouterr().err
