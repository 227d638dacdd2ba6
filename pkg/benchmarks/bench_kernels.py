"""Timing comparison of the compiled element kernels against the numpy
fallback, on the assembly calls the Newton loop makes, plus one whole
solver step under each backend.

Run:  python benchmarks/bench_kernels.py [--nx 12] [--repeats 50]
"""

import argparse
import time

import numpy as np

from gblrom.fields import gaussian_bump, isotropic_field
from gblrom.fom import ParameterSet, SimulationConfig, assemble_operators, initial_state, step
from gblrom.kernels import reference
from gblrom.mesh import build_box_mesh

try:
    from gblrom.kernels import _core
except ImportError:
    _core = None


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(nx, repeats):
    mesh = build_box_mesh(nx, nx, nx, [10.0, 10.0, 10.0])
    vols = mesh.volumes()
    rng = np.random.default_rng(0)
    p = rng.uniform(-1, 1, (mesh.n_tets, 4))
    print(f"mesh: {mesh.n_vertices} vertices, {mesh.n_tets} tets\n")
    header = f"{'kernel':<28s} {'numpy (ms)':>12s} {'compiled (ms)':>14s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for name in ("weighted_mass_blocks", "squared_weighted_mass_blocks",
                 "cubic_load", "double_well_integral"):
        ref_fn = getattr(reference, name)
        t_ref = _time(lambda: ref_fn(vols, p), repeats)
        if _core is not None:
            core_fn = getattr(_core, name)
            t_core = _time(lambda: core_fn(vols, p), repeats)
            print(f"{name:<28s} {t_ref * 1e3:12.3f} {t_core * 1e3:14.3f} "
                  f"{t_ref / t_core:8.1f}x")
        else:
            print(f"{name:<28s} {t_ref * 1e3:12.3f} {'n/a':>14s} {'':>8s}")


def bench_solver_step(nx):
    import gblrom.kernels as kernels

    results = {}
    for backend_name, impl in (("numpy", reference),
                               ("compiled", _core) if _core is not None else (None, None)):
        if impl is None:
            continue
        for fn in ("weighted_mass_blocks", "squared_weighted_mass_blocks",
                   "cubic_load", "double_well_integral", "scatter_add"):
            setattr(kernels, fn, getattr(impl, fn))
        mesh = build_box_mesh(nx, nx, nx, [10.0, 10.0, 10.0])
        ops = assemble_operators(mesh, isotropic_field(mesh, 1.0, "T"),
                                 isotropic_field(mesh, 50.0, "D"))
        phi0 = gaussian_bump(mesh, [5, 5, 5], 0.1, 2.0, -1.0)
        params = ParameterSet(nu=0.356, m0=3860.7, kappa=700.4, delta=0.24,
                              delta_n=21041.0, s_n=41978.0)
        cfg = SimulationConfig(dt=0.5, n_steps=1,
                               epsilon=(10.0 / nx) * np.sqrt(params.kappa))
        state = initial_state(ops, phi0, params=params, config=cfg)
        t0 = time.perf_counter()
        for _ in range(5):
            state = step(state, params, cfg, ops)
        results[backend_name] = (time.perf_counter() - t0) / 5
    print("\nfull solver step (including sparse solves)")
    for name, seconds in results.items():
        print(f"  {name:<10s} {seconds * 1e3:10.1f} ms/step")
    if len(results) == 2:
        print(f"  step speedup from compiled kernels: "
              f"{results['numpy'] / results['compiled']:.2f}x")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--nx", type=int, default=12)
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()
    bench_kernels(args.nx, args.repeats)
    bench_solver_step(args.nx)
