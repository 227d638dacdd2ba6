"""Pipeline stages behind the CLI: mesh, simulate, POD, training, estimation,
and the end-to-end reproduce command with its metrics summary.

Every stage writes a manifest (config hash, input hashes, versions, wall time,
seed) next to its outputs. CSV outputs are deterministic for a fixed config
and seed; wall times live only in manifests and the summary, never in CSVs.
"""

from __future__ import annotations

import json
import hashlib
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy

from . import __version__, kernels
from ._text import fnum
from .config import RunConfig, stage_seed
from .fields import (NodalField, gaussian_bump, isotropic_field, load_nodal_field,
                     load_tensor_field, save_nodal_field, save_tensor_field)
from .fom import (NewtonError, Operators, ParameterSet, assemble_operators,
                  initial_state, run, tumor_volume)
from .galerkin import lift_state, pod_galerkin_run
from .mesh import Mesh, build_box_mesh, load_mesh, save_mesh
from .mlp import forward, init_mlp, loss_and_gradient, flatten_gradient, mse_loss
from .pod import (SnapshotSet, basis_fingerprint, build_combined_basis,
                  load_basis_archive, method_of_snapshots, project,
                  save_basis_archive, write_coefficient_csv)
from .surrogate import (NormalizationSpec, build_direct_dataset, build_inverse_dataset,
                        default_direct_net, default_inverse_net, denormalize_params,
                        estimate_parameters, forward_mean, load_network_archive,
                        normalize_params, predict_direct_coeffs, refine_parameters,
                        sample_parameters, save_network_archive)
from .training import train_lbfgs, write_loss_csv
from .vtkio import write_vtk


class PipelineError(RuntimeError):
    code = "pipeline"


class MissingArtifactError(PipelineError):
    code = "missing-artifact"


@dataclass
class Problem:
    mesh: Mesh
    motility: object
    diffusivity: object
    ops: Operators
    phi0: NodalField


@dataclass
class RunResult:
    params: ParameterSet
    times: np.ndarray
    phi: np.ndarray
    mu: np.ndarray
    nhat: np.ndarray
    diagnostics: np.ndarray  # rows of (time, free_energy, total_mass, tumor_volume)


def setup_problem(cfg: RunConfig) -> Problem:
    if cfg.mesh.kind == "file" or cfg.mesh.path:
        mesh = load_mesh(cfg.mesh.path)
    else:
        mesh = build_box_mesh(cfg.mesh.nx, cfg.mesh.ny, cfg.mesh.nz,
                              cfg.mesh.extents, cfg.mesh.origin)
    motility = (load_tensor_field(cfg.motility.path, mesh, "T")
                if cfg.motility.kind == "file"
                else isotropic_field(mesh, cfg.motility.value, "T"))
    diffusivity = (load_tensor_field(cfg.diffusivity.path, mesh, "D")
                   if cfg.diffusivity.kind == "file"
                   else isotropic_field(mesh, cfg.diffusivity.value, "D"))
    ops = assemble_operators(mesh, motility, diffusivity)
    phi0 = gaussian_bump(mesh, cfg.initial.center, cfg.initial.sharpness,
                         cfg.initial.amplitude, cfg.initial.offset)
    return Problem(mesh, motility, diffusivity, ops, phi0)


def run_single(problem: Problem, params: ParameterSet, cfg: RunConfig) -> RunResult:
    state0 = initial_state(problem.ops, problem.phi0, oxygen0=cfg.initial.oxygen,
                           params=params, config=cfg.simulation)
    states, reports = run(state0, params, cfg.simulation, problem.ops,
                          record_every=cfg.record_every)
    return RunResult(
        params=params,
        times=np.array([s.time for s in states]),
        phi=np.column_stack([s.phi.values for s in states]),
        mu=np.column_stack([s.mu.values for s in states]),
        nhat=np.column_stack([s.nhat.values for s in states]),
        diagnostics=np.array([[r.time, r.free_energy, r.total_mass, r.tumor_volume]
                              for r in reports]),
    )


def _batch_worker(payload):
    cfg_dict, base_dir, rows, indices = payload
    from .config import config_from_dict

    cfg = config_from_dict(cfg_dict, base_dir=base_dir)
    problem = setup_problem(cfg)
    out = []
    for idx, row in zip(indices, rows):
        out.append((idx, run_single(problem, ParameterSet.from_array(row), cfg)))
    return out


def run_group(cfg: RunConfig, problem: Problem, params_list: list, group: str,
              cache_dir: str | None = None) -> list[RunResult]:
    """Run the full-order model for each parameter set, with an npz cache.

    Results are ordered by parameter index regardless of worker count, so the
    downstream artifacts do not depend on the parallel schedule.
    """
    cache_dir = cache_dir or os.path.join(cfg.out, "runs")
    os.makedirs(cache_dir, exist_ok=True)
    fom_hash = cfg.fom_hash()
    results: dict[int, RunResult] = {}
    missing = []
    for k, params in enumerate(params_list):
        path = os.path.join(cache_dir, f"{group}_{k:03d}.npz")
        if os.path.isfile(path):
            with np.load(path, allow_pickle=False) as data:
                if ("fom_hash" in data.files
                        and str(data["fom_hash"]) == fom_hash
                        and np.array_equal(data["params"], params.as_array())):
                    results[k] = RunResult(
                        params=ParameterSet.from_array(data["params"]),
                        times=data["times"], phi=data["phi"], mu=data["mu"],
                        nhat=data["nhat"], diagnostics=data["diagnostics"])
                    continue
        missing.append(k)

    if missing:
        if cfg.workers > 1 and len(missing) > 1:
            chunks = [missing[i::cfg.workers] for i in range(cfg.workers)]
            chunks = [c for c in chunks if c]
            payloads = [
                (cfg.to_dict(), os.path.dirname(cfg.out) or ".",
                 [params_list[k].as_array() for k in chunk], chunk)
                for chunk in chunks
            ]
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                for batch in pool.map(_batch_worker, payloads):
                    for idx, result in batch:
                        results[idx] = result
        else:
            for k in missing:
                results[k] = run_single(problem, params_list[k], cfg)
        for k in missing:
            r = results[k]
            np.savez(os.path.join(cache_dir, f"{group}_{k:03d}.npz"),
                     fom_hash=fom_hash, params=r.params.as_array(), times=r.times,
                     phi=r.phi, mu=r.mu, nhat=r.nhat, diagnostics=r.diagnostics)
    return [results[k] for k in range(len(params_list))]


def _hash_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()


def write_manifest(outdir, command: str, cfg: RunConfig, inputs: dict,
                   wall_time: float, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "inputs": {name: _hash_file(path) for name, path in inputs.items()
                   if os.path.isfile(path)},
        "versions": {
            "gblrom": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "kernels": kernels.BACKEND,
        },
        "wall_time_s": wall_time,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _require(path, what: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(f"{what} not found at {path}; run the producing command first")
    return path


# ---------------------------------------------------------------- commands


def cmd_generate_mesh(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    outdir = os.path.join(cfg.out, "mesh")
    os.makedirs(outdir, exist_ok=True)
    problem = setup_problem(cfg)
    mesh_path = os.path.join(outdir, "mesh.txt")
    save_mesh(problem.mesh, mesh_path)
    save_tensor_field(problem.motility, os.path.join(outdir, "motility.txt"))
    save_tensor_field(problem.diffusivity, os.path.join(outdir, "diffusivity.txt"))
    write_manifest(outdir, "generate-mesh", cfg, {}, time.perf_counter() - t0,
                   {"n_vertices": problem.mesh.n_vertices, "n_tets": problem.mesh.n_tets})
    return {"mesh": mesh_path, "n_vertices": problem.mesh.n_vertices,
            "n_tets": problem.mesh.n_tets}


def cmd_simulate(cfg: RunConfig, params: ParameterSet | None = None,
                 tag: str = "simulate") -> dict:
    t0 = time.perf_counter()
    outdir = os.path.join(cfg.out, tag)
    os.makedirs(outdir, exist_ok=True)
    problem = setup_problem(cfg)
    params = params or cfg.nominal
    params.validate(strict=cfg.strict_ranges)
    result = run_single(problem, params, cfg)

    for col, t in enumerate(result.times):
        for name, mat in (("phi", result.phi), ("mu", result.mu), ("nhat", result.nhat)):
            save_nodal_field(NodalField(mat[:, col], name=name),
                             os.path.join(outdir, f"{name}_{col:04d}.txt"))
        write_vtk(os.path.join(outdir, f"state_{col:04d}.vtk"), problem.mesh,
                  {"phi": result.phi[:, col], "mu": result.mu[:, col],
                   "nhat": result.nhat[:, col]},
                  comment=f"recorded step {col}")
    csv_path = os.path.join(outdir, "diagnostics.csv")
    with open(csv_path, "w") as fh:
        fh.write("time,free_energy,total_mass,tumor_volume\n")
        for row in result.diagnostics:
            fh.write(",".join(fnum(v) for v in row) + "\n")
    write_manifest(outdir, "simulate", cfg, {}, time.perf_counter() - t0,
                   {"n_recorded": int(result.times.size)})
    return {"outdir": outdir, "diagnostics": csv_path,
            "n_recorded": int(result.times.size)}


def _snapshot_sets(results: list[RunResult], inner: str) -> dict:
    return {
        var: [SnapshotSet(var, k, getattr(r, attr), inner)
              for k, r in enumerate(results)]
        for var, attr in (("phi", "phi"), ("mu", "mu"), ("nhat", "nhat"))
    }


def cmd_build_pod(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    outdir = os.path.join(cfg.out, "pod")
    os.makedirs(outdir, exist_ok=True)
    problem = setup_problem(cfg)
    spec = NormalizationSpec.from_table()
    psets = sample_parameters(cfg.pod.n_parameter_sets, spec,
                              stage_seed(cfg.seed, "pod_sampling"))
    results = run_group(cfg, problem, psets, "pod")

    weight = problem.ops.mass if cfg.pod.inner_product == "mass" else None
    snaps = _snapshot_sets(results, cfg.pod.inner_product)
    bases = build_combined_basis(snaps, cfg.pod.ic, weight=weight)
    basis_dir = os.path.join(outdir, "basis")
    save_basis_archive(basis_dir, bases)

    coeff_dir = os.path.join(outdir, "coeffs")
    os.makedirs(coeff_dir, exist_ok=True)
    for k, r in enumerate(results):
        coeffs = np.column_stack([project(r.phi[:, c], bases["phi"])
                                  for c in range(r.phi.shape[1])]).T
        write_coefficient_csv(os.path.join(coeff_dir, f"set_{k:03d}.csv"),
                              r.times, coeffs)

    info = {var: {"n_pod": b.n_pod, "retained_ratio": b.retained_ratio}
            for var, b in bases.items()}
    write_manifest(outdir, "build-pod", cfg, {}, time.perf_counter() - t0,
                   {"bases": info, "fingerprint": basis_fingerprint(basis_dir)})
    return {"basis_dir": basis_dir, "bases": info}


def _load_basis(cfg: RunConfig, ops: Operators):
    basis_dir = _require(os.path.join(cfg.out, "pod", "basis"), "POD basis archive")
    weight = ops.mass if cfg.pod.inner_product == "mass" else None
    return basis_dir, load_basis_archive(basis_dir, weight=weight)


def _direct_trajectories(cfg, problem, spec):
    psets = sample_parameters(cfg.direct.n_parameter_sets, spec,
                              stage_seed(cfg.seed, "direct_sampling"))
    results = run_group(cfg, problem, psets, "direct")
    return [(r.params, r.times, r.phi) for r in results], results


def cmd_train_direct(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    outdir = os.path.join(cfg.out, "direct")
    os.makedirs(outdir, exist_ok=True)
    problem = setup_problem(cfg)
    basis_dir, bases = _load_basis(cfg, problem.ops)
    spec = NormalizationSpec.from_table()
    trajectories, _ = _direct_trajectories(cfg, problem, spec)

    dataset = build_direct_dataset(trajectories, bases["phi"], spec, cfg.horizon,
                                   test_fraction=cfg.direct.test_fraction,
                                   seed=stage_seed(cfg.seed, "direct_split"),
                                   strict=cfg.strict_ranges)
    # An ensemble of identically shaped members (distinct seeds) cuts the
    # surrogate variance; predictions average the members.
    nets, all_curves = [], []
    for member in range(cfg.direct.n_members):
        net = default_direct_net(bases["phi"].n_pod, hidden=cfg.direct.hidden,
                                 seed=stage_seed(cfg.seed, "direct_init") + member)
        all_curves.append(train_lbfgs(net, dataset.x_train, dataset.y_train,
                                      dataset.x_test, dataset.y_test,
                                      epochs=cfg.direct.epochs,
                                      history_size=cfg.direct.history_size))
        nets.append(net)
    model_path = os.path.join(outdir, "model.npz")
    save_network_archive(model_path, nets, spec, basis_fingerprint(basis_dir),
                         extra={"role": "direct", "horizon": cfg.horizon,
                                "n_rows": int(dataset.inputs.shape[0])})
    loss_path = os.path.join(outdir, "loss.csv")
    write_loss_csv(loss_path, all_curves[0])
    for member in range(1, len(all_curves)):
        write_loss_csv(os.path.join(outdir, f"loss_m{member}.csv"), all_curves[member])

    final_train = float(np.mean([c.train_mse[-1] for c in all_curves]))
    final_test = float(np.mean([c.test_mse[-1] for c in all_curves]))
    # Plateau measure: how much the second half of the run still improved the
    # test error. Near 1 means the curve has flattened; the first half
    # typically improves it by orders of magnitude.
    half_ratios = []
    for c in all_curves:
        t = c.test_mse
        half_ratios.append(t[len(t) // 2] / max(t[-1], 1e-300))
    summary = {
        "rows": int(dataset.inputs.shape[0]),
        "final_train_mse": final_train,
        "final_test_mse": final_test,
        "test_train_ratio": final_test / max(final_train, 1e-300),
        "test_half_final_ratio": float(max(half_ratios)),
        "converged": all(c.converged for c in all_curves),
    }
    write_manifest(outdir, "train-direct", cfg, {"basis": os.path.join(basis_dir, "phi", "meta")},
                   time.perf_counter() - t0, dict(summary))
    return {"model": model_path, "loss": loss_path, "curves": all_curves[0],
            "dataset_rows": int(dataset.inputs.shape[0]), **summary}


def cmd_train_inverse(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    outdir = os.path.join(cfg.out, "inverse")
    os.makedirs(outdir, exist_ok=True)
    problem = setup_problem(cfg)
    basis_dir, bases = _load_basis(cfg, problem.ops)
    spec = NormalizationSpec.from_table()
    trajectories, _ = _direct_trajectories(cfg, problem, spec)

    dt_record = cfg.simulation.dt * cfg.record_every
    dataset = build_inverse_dataset(trajectories, bases["phi"], spec,
                                    cfg.inverse.gap_days,
                                    cfg.inverse.pairs_per_trajectory, dt_record,
                                    test_fraction=cfg.inverse.test_fraction,
                                    seed=stage_seed(cfg.seed, "inverse_pairs"),
                                    strict=cfg.strict_ranges)
    net = default_inverse_net(bases["phi"].n_pod, hidden=cfg.inverse.hidden,
                              seed=stage_seed(cfg.seed, "inverse_init"))
    curves = train_lbfgs(net, dataset.x_train, dataset.y_train,
                         dataset.x_test, dataset.y_test,
                         epochs=cfg.inverse.epochs,
                         history_size=cfg.inverse.history_size)
    model_path = os.path.join(outdir, "model.npz")
    save_network_archive(model_path, net, spec, basis_fingerprint(basis_dir),
                         extra={"role": "inverse", "gap_days": cfg.inverse.gap_days,
                                "n_rows": int(dataset.inputs.shape[0])})
    loss_path = os.path.join(outdir, "loss.csv")
    write_loss_csv(loss_path, curves)

    # Held-out-pair error in normalized parameter space, mean and max.
    pred = forward_mean(net, dataset.x_test)
    err = np.abs(pred - dataset.y_test)
    mean_err = float(err.mean())
    max_err = float(err.mean(axis=0).max())
    write_manifest(outdir, "train-inverse", cfg,
                   {"basis": os.path.join(basis_dir, "phi", "meta")},
                   time.perf_counter() - t0,
                   {"rows": int(dataset.inputs.shape[0]),
                    "final_train_mse": curves.train_mse[-1],
                    "final_test_mse": curves.test_mse[-1],
                    "mean_normalized_error": mean_err,
                    "max_param_normalized_error": max_err})
    return {"model": model_path, "loss": loss_path, "curves": curves,
            "mean_normalized_error": mean_err,
            "max_param_normalized_error": max_err,
            "dataset_rows": int(dataset.inputs.shape[0])}


def cmd_predict(cfg: RunConfig, params: ParameterSet, t: float) -> dict:
    t0 = time.perf_counter()
    outdir = os.path.join(cfg.out, "predict")
    os.makedirs(outdir, exist_ok=True)
    problem = setup_problem(cfg)
    _, bases = _load_basis(cfg, problem.ops)
    model_path = _require(os.path.join(cfg.out, "direct", "model.npz"), "direct network")
    nets, spec, meta = load_network_archive(model_path)
    coeffs = predict_direct_coeffs(nets, params, t, spec, meta["horizon"])
    phi = NodalField(bases["phi"].modes @ coeffs, name="phi")
    field_path = os.path.join(outdir, f"phi_t{t:g}.txt")
    save_nodal_field(phi, field_path)
    write_vtk(os.path.join(outdir, f"phi_t{t:g}.vtk"), problem.mesh,
              {"phi": phi.values}, comment=f"surrogate prediction at t={t:g} days")
    volume = tumor_volume(phi, problem.ops)
    write_manifest(outdir, "predict", cfg, {"model": model_path},
                   time.perf_counter() - t0, {"t": t, "tumor_volume": volume})
    return {"field": field_path, "tumor_volume": volume}


def cmd_estimate(cfg: RunConfig, snapshot_t0, snapshot_t1,
                 t0_days: float | None = None, t1_days: float | None = None) -> dict:
    """Estimate the six parameters from two tumor snapshots.

    The inverse network produces the raw estimate; when refinement is enabled
    the estimate is polished by matching the observed reduced coefficients
    through the forward surrogate, which needs the observation times (they
    default to the configured follow-up window ending at the horizon).
    """
    wall = time.perf_counter()
    outdir = os.path.join(cfg.out, "estimate")
    os.makedirs(outdir, exist_ok=True)
    problem = setup_problem(cfg)
    _, bases = _load_basis(cfg, problem.ops)
    model_path = _require(os.path.join(cfg.out, "inverse", "model.npz"), "inverse network")
    net, spec, _ = load_network_archive(model_path)
    phi_a = load_nodal_field(snapshot_t0, problem.mesh)
    phi_b = load_nodal_field(snapshot_t1, problem.mesh)
    params, clipped = estimate_parameters(net, phi_a, phi_b, bases["phi"], spec)
    refined = False
    if cfg.inverse.refine:
        direct_path = _require(os.path.join(cfg.out, "direct", "model.npz"),
                               "direct network (needed for refinement)")
        nets_direct, spec_dir, meta_dir = load_network_archive(direct_path)
        if t1_days is None:
            t1_days = cfg.horizon
        if t0_days is None:
            t0_days = t1_days - cfg.inverse.gap_days
        a0 = project(phi_a.values, bases["phi"])
        a1 = project(phi_b.values, bases["phi"])
        # the clipping mask keeps reporting the raw network drift
        params, _ = refine_parameters(
            nets_direct, [(t0_days, a0), (t1_days, a1)], spec_dir,
            meta_dir["horizon"], x0=normalize_params(params, spec))
        refined = True
    names = ("nu", "m0", "kappa", "delta", "delta_n", "s_n")
    report = {
        "parameters": {k: getattr(params, k) for k in names},
        "clipped": {k: bool(c) for k, c in zip(names, clipped)},
        "any_clipped": bool(clipped.any()),
        "refined": refined,
    }
    with open(os.path.join(outdir, "estimate.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    write_manifest(outdir, "estimate", cfg,
                   {"model": model_path, "t0": snapshot_t0, "t1": snapshot_t1},
                   time.perf_counter() - wall, {"report": report})
    return report


def _galerkin_check(cfg, problem, bases, results) -> float:
    """Final-time relative L2 error of the reduced run against the full model,
    for one in-sample parameter set."""
    k = cfg.pod.galerkin_check_set
    truth = results[k]
    state0 = initial_state(problem.ops, problem.phi0, oxygen0=cfg.initial.oxygen,
                           params=truth.params, config=cfg.simulation)
    reduced = pod_galerkin_run(state0, truth.params, cfg.simulation, bases,
                               problem.ops, record_every=cfg.record_every)
    lifted = lift_state(reduced[-1], bases)
    diff = lifted.phi.values - truth.phi[:, -1]
    m = problem.ops.mass
    return float(np.sqrt(diff @ (m @ diff)) / np.sqrt(truth.phi[:, -1] @ (m @ truth.phi[:, -1])))


def _gradient_check(seed: int, n_configs: int = 20) -> float:
    """Max relative disagreement between backprop and central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    from .mlp import get_params, set_params

    for _ in range(n_configs):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(2, 7))] + [int(rng.integers(2, 17)) for _ in range(depth)] \
            + [int(rng.integers(1, 5))]
        net = init_mlp(sizes, seed=int(rng.integers(0, 2 ** 31)))
        x = rng.standard_normal((8, sizes[0]))
        y = rng.standard_normal((8, sizes[-1]))
        _, grads = loss_and_gradient(net, x, y)
        g = flatten_gradient(grads)
        base = get_params(net)
        fd = np.zeros_like(g)
        step = 1e-6
        for i in range(base.size):
            up = base.copy()
            up[i] += step
            set_params(net, up)
            lp = mse_loss(net, x, y)
            down = base.copy()
            down[i] -= step
            set_params(net, down)
            lm = mse_loss(net, x, y)
            fd[i] = (lp - lm) / (2 * step)
        set_params(net, base)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-30)))
    return worst


def _pod_oracle_check(seed: int, trials: int = 5) -> float:
    """Max relative mismatch of correlation eigenvalues vs squared SVD values."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        f = rng.standard_normal((30, 10))
        res = method_of_snapshots(f, 1.0)
        sv = np.linalg.svd(f, compute_uv=False)
        lam = res.eigenvalues[:sv.size]
        worst = max(worst, float(np.max(np.abs(lam - sv ** 2) / sv ** 2)))
    return worst


def cmd_reproduce(cfg: RunConfig) -> dict:
    """Run the whole pipeline and write metrics.csv plus a human summary.

    metrics.csv holds only deterministic quantities; timings go to the
    manifest and summary so reruns stay byte-identical.
    """
    t_start = time.perf_counter()
    outdir = os.path.join(cfg.out, "reproduce")
    os.makedirs(outdir, exist_ok=True)
    metrics: list[tuple[str, str, float]] = []
    timings: dict[str, float] = {}

    problem = setup_problem(cfg)
    cmd_generate_mesh(cfg)

    # Growth-free stability fixture: per-step energy and mass diagnostics.
    t0 = time.perf_counter()
    stability = run_single(problem, cfg.stability, cfg)
    timings["stability_run"] = time.perf_counter() - t0
    stab_csv = os.path.join(outdir, "stability_diagnostics.csv")
    with open(stab_csv, "w") as fh:
        fh.write("time,free_energy,total_mass,tumor_volume\n")
        for row in stability.diagnostics:
            fh.write(",".join(fnum(v) for v in row) + "\n")
    f_vals = stability.diagnostics[:, 1]
    mass_vals = stability.diagnostics[:, 2]
    metrics.append(("stability", "max_energy_increase", float(np.diff(f_vals).max())))
    metrics.append(("stability", "energy_tolerance", float(1e-10 * abs(f_vals[0]))))
    metrics.append(("stability", "mass_drift", float(abs(mass_vals[-1] - mass_vals[0]))))
    metrics.append(("stability", "mass_tolerance",
                    float(1e-8 * abs(mass_vals[0]) + 1e-12)))

    # POD basis from the designated parameter sets.
    t0 = time.perf_counter()
    pod_out = cmd_build_pod(cfg)
    timings["build_pod"] = time.perf_counter() - t0
    _, bases = _load_basis(cfg, problem.ops)
    spec = NormalizationSpec.from_table()
    pod_params = sample_parameters(cfg.pod.n_parameter_sets, spec,
                                   stage_seed(cfg.seed, "pod_sampling"))
    pod_results = run_group(cfg, problem, pod_params, "pod")
    weight = problem.ops.mass if cfg.pod.inner_product == "mass" else None
    snaps = _snapshot_sets(pod_results, cfg.pod.inner_product)
    for var, basis in bases.items():
        metrics.append(("pod", f"{var}_n_pod", float(basis.n_pod)))
        metrics.append(("pod", f"{var}_retained_ratio", basis.retained_ratio))
        total, err = 0.0, 0.0
        for s in snaps[var]:
            wf = s.data if weight is None else weight @ s.data
            coeffs = basis.modes.T @ wf
            total += float(np.sum(s.data * wf))
            err += float(np.sum(s.data * wf) - np.sum(coeffs * coeffs))
        metrics.append(("pod", f"{var}_projection_error_ratio", err / total))

    metrics.append(("pod", "oracle_eigval_mismatch",
                    _pod_oracle_check(stage_seed(cfg.seed, "pod_oracle"))))

    t0 = time.perf_counter()
    galerkin_err = _galerkin_check(cfg, problem, bases, pod_results)
    timings["galerkin_check"] = time.perf_counter() - t0
    metrics.append(("galerkin", "final_rel_l2_error", galerkin_err))

    metrics.append(("mlp", "gradcheck_max_rel_err",
                    _gradient_check(stage_seed(cfg.seed, "gradcheck"))))

    # Direct surrogate.
    t0 = time.perf_counter()
    direct_out = cmd_train_direct(cfg)
    timings["train_direct"] = time.perf_counter() - t0
    metrics.append(("direct", "final_train_mse", direct_out["final_train_mse"]))
    metrics.append(("direct", "final_test_mse", direct_out["final_test_mse"]))
    metrics.append(("direct", "test_train_ratio", direct_out["test_train_ratio"]))
    metrics.append(("direct", "test_half_final_ratio",
                    direct_out["test_half_final_ratio"]))

    # Inverse surrogate.
    t0 = time.perf_counter()
    inverse_out = cmd_train_inverse(cfg)
    timings["train_inverse"] = time.perf_counter() - t0
    metrics.append(("inverse", "mean_normalized_error",
                    inverse_out["mean_normalized_error"]))
    metrics.append(("inverse", "max_param_normalized_error",
                    inverse_out["max_param_normalized_error"]))

    # Held-out patients: forward accuracy, speed-up, inverse round trip.
    patients = sample_parameters(cfg.n_patients, spec,
                                 stage_seed(cfg.seed, "heldout_sampling"))
    t0 = time.perf_counter()
    truth_runs = run_group(cfg, problem, patients, "heldout")
    timings["heldout_runs"] = time.perf_counter() - t0

    net_dir, spec_dir, meta_dir = load_network_archive(
        os.path.join(cfg.out, "direct", "model.npz"))
    net_inv, spec_inv, _ = load_network_archive(
        os.path.join(cfg.out, "inverse", "model.npz"))

    horizon = meta_dir["horizon"]
    vol_errors = []
    for r in truth_runs:
        coeffs = predict_direct_coeffs(net_dir, r.params, horizon, spec_dir, horizon)
        phi_pred = bases["phi"].modes @ coeffs
        v_pred = tumor_volume(phi_pred, problem.ops)
        v_true = r.diagnostics[-1, 3]
        vol_errors.append(abs(v_pred - v_true) / abs(v_true))
    vol_errors = np.array(vol_errors)
    metrics.append(("direct", "heldout_volume_within_10pct",
                    float(np.sum(vol_errors <= 0.10))))
    metrics.append(("direct", "heldout_n_patients", float(len(patients))))
    metrics.append(("direct", "heldout_volume_median_rel_err",
                    float(np.median(vol_errors))))

    # Timing comparison: one fresh full-order run vs a full surrogate trajectory.
    t0 = time.perf_counter()
    run_single(problem, patients[0], cfg)
    fom_time = time.perf_counter() - t0
    t0 = time.perf_counter()
    for t in truth_runs[0].times:
        coeffs = predict_direct_coeffs(net_dir, patients[0], t, spec_dir, horizon)
        tumor_volume(bases["phi"].modes @ coeffs, problem.ops)
    surrogate_time = time.perf_counter() - t0
    timings["fom_single_run"] = fom_time
    timings["surrogate_trajectory"] = surrogate_time
    timings["speedup_factor"] = fom_time / max(surrogate_time, 1e-12)

    # Inverse round trip on the patients: estimate from the latest follow-up
    # window (the clinically available pair of scans), optionally refine
    # against the forward surrogate, rerun the full model, compare volumes.
    gap_steps = int(round(cfg.inverse.gap_days / (cfg.simulation.dt * cfg.record_every)))
    t1_idx = truth_runs[0].phi.shape[1] - 1
    t0_idx = t1_idx - gap_steps
    times = truth_runs[0].times
    rerun_errors = []
    param_errors = []
    for r in truth_runs:
        a0 = project(r.phi[:, t0_idx], bases["phi"])
        a1 = project(r.phi[:, t1_idx], bases["phi"])
        x_norm = forward_mean(net_inv, np.concatenate([a0, a1]))
        param_errors.append(np.abs(np.clip(x_norm, 0, 1)
                                   - normalize_params(r.params, spec_inv)).mean())
        if cfg.inverse.refine:
            estimated, _ = refine_parameters(
                net_dir, [(times[t0_idx], a0), (times[t1_idx], a1)], spec_dir,
                horizon, x0=x_norm)
        else:
            estimated, _ = denormalize_params(x_norm, spec_inv, clip=True)
        try:
            rerun = run_single(problem, estimated, cfg)
            v_est = rerun.diagnostics[-1, 3]
        except NewtonError:
            v_est = float("nan")
        v_true = r.diagnostics[-1, 3]
        rerun_errors.append(abs(v_est - v_true) / abs(v_true))
    rerun_errors = np.array(rerun_errors)
    ok = np.sum(np.nan_to_num(rerun_errors, nan=np.inf) <= 0.10)
    metrics.append(("inverse", "patient_mean_normalized_error",
                    float(np.mean(param_errors))))
    metrics.append(("inverse", "rerun_volume_within_10pct", float(ok)))
    metrics.append(("inverse", "rerun_n_patients", float(len(patients))))
    metrics.append(("inverse", "rerun_volume_median_rel_err",
                    float(np.median(rerun_errors))))

    metrics_path = os.path.join(outdir, "metrics.csv")
    with open(metrics_path, "w") as fh:
        fh.write("section,name,value\n")
        for section, name, value in metrics:
            fh.write(f"{section},{name},{fnum(value)}\n")

    total_time = time.perf_counter() - t_start
    timings["total"] = total_time
    write_manifest(outdir, "reproduce", cfg, {}, total_time,
                   {"timings": timings, "pod": pod_out["bases"]})
    _write_summary(os.path.join(outdir, "summary.txt"), metrics, timings)
    return {"metrics": metrics_path, "metrics_rows": metrics, "timings": timings,
            "outdir": outdir}


def _write_summary(path, metrics, timings) -> None:
    with open(path, "w") as fh:
        fh.write("pipeline summary\n================\n\nmetrics\n-------\n")
        for section, name, value in metrics:
            fh.write(f"{section:>10s}  {name:<34s} {value:.6g}\n")
        fh.write("\ntimings (seconds)\n-----------------\n")
        for name, value in timings.items():
            fh.write(f"{name:<24s} {value:.3f}\n")


def read_metrics(path) -> dict:
    """metrics.csv rows as a {(section, name): value} dict."""
    out = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            section, name, value = line.strip().split(",")
            out[(section, name)] = float(value)
    return out
