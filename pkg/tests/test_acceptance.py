"""Acceptance gate: every criterion at its stated tolerance, one line each.

The desk-scale pipeline (configs/desk.yaml) runs once per session into a
temporary directory; criteria then check its artifacts. Run with
`pytest tests/test_acceptance.py -v -s` to see the per-criterion lines.
"""

import json
import os
import shutil

import numpy as np
import pytest

from gblrom.config import load_config
from gblrom.pipeline import cmd_reproduce, read_metrics
from gblrom.pod import method_of_snapshots

pytestmark = pytest.mark.acceptance

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def _criterion(num, name, ok, detail):
    print(f"\n[criterion {num:2d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} ({name}): {detail}"


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    cfg = load_config(os.path.join(ROOT, "configs", "desk.yaml"))
    cfg.out = str(tmp_path_factory.mktemp("desk"))
    result = cmd_reproduce(cfg)
    metrics = read_metrics(result["metrics"])
    with open(os.path.join(cfg.out, "reproduce", "manifest.json")) as fh:
        manifest = json.load(fh)
    return cfg, result, metrics, manifest


def _stability_table(cfg):
    path = os.path.join(cfg.out, "reproduce", "stability_diagnostics.csv")
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    assert rows.shape[0] == cfg.simulation.n_steps + 1
    return rows


def test_criterion_1_energy_stability(desk):
    cfg, _, _, manifest = desk
    rows = _stability_table(cfg)
    energies = rows[:, 1]
    worst = float(np.diff(energies).max())
    tol = 1e-10 * abs(energies[0])
    runtime = manifest["timings"]["stability_run"]
    _criterion(1, "energy stability (nu=0, 60 steps)",
               worst <= tol and runtime <= 60.0,
               f"max per-step increase {worst:.3e} vs tol {tol:.3e}, "
               f"runtime {runtime:.1f}s")


def test_criterion_2_mass_conservation(desk):
    cfg, _, _, manifest = desk
    rows = _stability_table(cfg)
    masses = rows[:, 2]
    drift = abs(masses[-1] - masses[0])
    tol = 1e-8 * abs(masses[0]) + 1e-12
    runtime = manifest["timings"]["stability_run"]
    _criterion(2, "mass conservation (nu=0)",
               drift <= tol and runtime <= 60.0,
               f"drift {drift:.3e} vs tol {tol:.3e}, runtime {runtime:.1f}s")


def test_criterion_3_pod_energy_accounting(desk):
    _, _, metrics, _ = desk
    details = []
    ok = True
    for var in ("phi", "mu", "nhat"):
        retained = metrics[("pod", f"{var}_retained_ratio")]
        err_ratio = metrics[("pod", f"{var}_projection_error_ratio")]
        ok &= retained >= 0.95
        ok &= abs(err_ratio - (1.0 - retained)) <= 1e-8
        details.append(f"{var}: retained {retained:.5f}, error ratio {err_ratio:.2e}")
    _criterion(3, "POD energy accounting", ok, "; ".join(details))


def test_criterion_4_pod_eigenvalues_match_svd_oracle():
    rng = np.random.default_rng(20260811)
    worst = 0.0
    for _ in range(20):
        f = rng.standard_normal((30, 10))
        res = method_of_snapshots(f, 1.0)
        sv = np.linalg.svd(f, compute_uv=False)
        worst = max(worst, float(np.max(np.abs(res.eigenvalues[:10] - sv ** 2) / sv ** 2)))
    _criterion(4, "method of snapshots vs dense SVD oracle", worst <= 1e-10,
               f"max relative eigenvalue mismatch {worst:.3e} on 20 random 30x10 matrices")


def test_criterion_5_pod_galerkin_fidelity(desk):
    _, _, metrics, _ = desk
    err = metrics[("galerkin", "final_rel_l2_error")]
    _criterion(5, "POD-Galerkin in-sample fidelity at ic=0.95", err <= 0.05,
               f"final-time relative L2 error {err:.4f} vs 0.05")


def test_criterion_6_gradient_check(desk):
    _, _, metrics, _ = desk
    worst = metrics[("mlp", "gradcheck_max_rel_err")]
    _criterion(6, "reverse-mode gradients vs central differences (20 configs)",
               worst <= 1e-5, f"max relative error {worst:.3e} vs 1e-5")


def test_criterion_7_direct_surrogate_accuracy(desk):
    """Plateau is judged by how little the second half of the epochs still
    moved the test MSE (the first half improves it by orders of magnitude)."""
    _, _, metrics, _ = desk
    ratio = metrics[("direct", "test_train_ratio")]
    half = metrics[("direct", "test_half_final_ratio")]
    hits = metrics[("direct", "heldout_volume_within_10pct")]
    total = metrics[("direct", "heldout_n_patients")]
    plateaued = half <= 2.0
    ok = ratio <= 3.0 and plateaued and hits >= 8
    _criterion(7, "direct surrogate accuracy", ok,
               f"test/train ratio {ratio:.2f} (<=3), half-run/final test MSE "
               f"{half:.2f} (<=2 means plateaued), volume within 10% for "
               f"{hits:.0f}/{total:.0f} held-out sets (>=8)")


def test_criterion_8_surrogate_speedup(desk):
    _, _, _, manifest = desk
    speedup = manifest["timings"]["speedup_factor"]
    _criterion(8, "surrogate trajectory >= 10x faster than the full model",
               speedup >= 10.0,
               f"full model {manifest['timings']['fom_single_run']:.2f}s vs "
               f"surrogate {manifest['timings']['surrogate_trajectory'] * 1e3:.1f}ms, "
               f"speedup {speedup:.0f}x")


def test_criterion_9_inverse_accuracy(desk):
    _, _, metrics, manifest = desk
    mean_err = metrics[("inverse", "mean_normalized_error")]
    hits = metrics[("inverse", "rerun_volume_within_10pct")]
    total = metrics[("inverse", "rerun_n_patients")]
    runtime = manifest["timings"]["total"]
    ok = mean_err <= 0.25 and hits >= 8 and runtime <= 7200.0
    _criterion(9, "inverse estimation accuracy", ok,
               f"mean normalized held-out-pair error {mean_err:.3f} (<=0.25), "
               f"rerun final volume within 10% for {hits:.0f}/{total:.0f} "
               f"patients (>=8), pipeline runtime {runtime:.0f}s (<=7200)")


def test_simulate_and_estimate_commands_on_desk_artifacts(desk):
    """Spec-level command checks on the finished pipeline: a full simulate
    records 61 states whose first diagnostics row is the seed volume, and
    estimate reports six parameters with clipping flags."""
    import numpy as np

    from gblrom.fields import load_nodal_field
    from gblrom.pipeline import cmd_estimate, cmd_simulate, setup_problem
    from gblrom.fom import tumor_volume

    cfg, _, _, _ = desk
    out = cmd_simulate(cfg)
    assert out["n_recorded"] == cfg.simulation.n_steps + 1 == 61
    rows = np.loadtxt(out["diagnostics"], delimiter=",", skiprows=1)
    problem = setup_problem(cfg)
    phi0 = load_nodal_field(os.path.join(out["outdir"], "phi_0000.txt"), problem.mesh)
    assert abs(rows[0, 3] - tumor_volume(phi0, problem.ops)) <= 1e-9 * rows[0, 3]

    report = cmd_estimate(cfg,
                          os.path.join(out["outdir"], "phi_0020.txt"),
                          os.path.join(out["outdir"], "phi_0060.txt"),
                          t0_days=10.0, t1_days=30.0)
    assert set(report["parameters"]) == {"nu", "m0", "kappa", "delta", "delta_n", "s_n"}
    assert set(report["clipped"]) == set(report["parameters"])
    assert isinstance(report["any_clipped"], bool)
    assert report["refined"] is True
    for value in report["parameters"].values():
        assert np.isfinite(value) and value > 0


def test_criterion_10_reproduce_determinism(tmp_path):
    cfg_path = os.path.join(ROOT, "configs", "mini.yaml")
    csv_trees = []
    for attempt in ("a", "b"):
        cfg = load_config(cfg_path)
        cfg.out = str(tmp_path / attempt)
        cmd_reproduce(cfg)
        tree = {}
        for root, _, files in os.walk(cfg.out):
            for name in sorted(files):
                if name.endswith(".csv"):
                    path = os.path.join(root, name)
                    with open(path, "rb") as fh:
                        tree[os.path.relpath(path, cfg.out)] = fh.read()
        csv_trees.append(tree)
        shutil.rmtree(cfg.out)
    same_names = set(csv_trees[0]) == set(csv_trees[1])
    diffs = [name for name in csv_trees[0]
             if csv_trees[1].get(name) != csv_trees[0][name]]
    _criterion(10, "byte-identical CSV outputs across reruns",
               same_names and not diffs,
               f"{len(csv_trees[0])} CSV files compared, differing: {diffs or 'none'}")
