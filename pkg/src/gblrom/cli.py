"""Command-line entry point: gbl-rom <command> --config <path> [--seed N] [--out DIR]."""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .fom import ParameterSet, SolverError, PARAM_ORDER
from .pipeline import (MissingArtifactError, PipelineError, cmd_build_pod,
                       cmd_estimate, cmd_generate_mesh, cmd_predict, cmd_reproduce,
                       cmd_simulate, cmd_train_direct, cmd_train_inverse)


def _parse_params(text: str) -> ParameterSet:
    """Comma-separated name=value pairs, e.g. nu=0.356,m0=3860.7,..."""
    values = {}
    for item in text.split(","):
        name, _, value = item.partition("=")
        name = name.strip()
        if name not in PARAM_ORDER:
            raise ConfigError(f"unknown parameter {name!r}; expected one of {PARAM_ORDER}")
        values[name] = float(value)
    missing = [k for k in PARAM_ORDER if k not in values]
    if missing:
        raise ConfigError(f"missing parameters: {', '.join(missing)}")
    return ParameterSet(**values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gbl-rom",
        description="Tumor growth simulation, model reduction, surrogate "
                    "training, and parameter estimation.")
    parser.add_argument("--version", action="version", version="%(prog)s 0.1.0")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML pipeline configuration")
        p.add_argument("--seed", type=int, help="override the config root seed")
        p.add_argument("--out", help="override the config output directory")
        p.add_argument("--strict-ranges", action="store_true",
                       help="reject parameters outside the biological ranges")

    common(sub.add_parser("generate-mesh", help="write the mesh and tensor fields"))
    p = sub.add_parser("simulate", help="run the full-order model once")
    common(p)
    p.add_argument("--params", help="name=value list; defaults to the config nominal set")
    common(sub.add_parser("build-pod", help="run the snapshot set and build the basis"))
    common(sub.add_parser("train-direct", help="train the forward surrogate"))
    p = sub.add_parser("predict", help="evaluate the forward surrogate")
    common(p)
    p.add_argument("--params", required=True, help="name=value list")
    p.add_argument("--time", type=float, required=True, help="prediction time in days")
    common(sub.add_parser("train-inverse", help="train the parameter estimator"))
    p = sub.add_parser("estimate", help="estimate parameters from two snapshots")
    common(p)
    p.add_argument("--snapshot-t0", required=True, help="nodal field file at the first time")
    p.add_argument("--snapshot-t1", required=True, help="nodal field file at the second time")
    p.add_argument("--t0", type=float, help="first observation time in days "
                   "(default: horizon minus the follow-up gap)")
    p.add_argument("--t1", type=float, help="second observation time in days "
                   "(default: the simulation horizon)")
    p.add_argument("--no-refine", action="store_true",
                   help="report the raw inverse-network estimate without "
                   "surrogate-based refinement")
    common(sub.add_parser("reproduce", help="run the whole pipeline and summarize"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.out = args.out
        if args.strict_ranges:
            cfg.strict_ranges = True

        if args.command == "generate-mesh":
            out = cmd_generate_mesh(cfg)
            print(f"mesh written to {out['mesh']} "
                  f"({out['n_vertices']} vertices, {out['n_tets']} tets)")
        elif args.command == "simulate":
            params = _parse_params(args.params) if args.params else None
            out = cmd_simulate(cfg, params=params)
            print(f"recorded {out['n_recorded']} states under {out['outdir']}")
        elif args.command == "build-pod":
            out = cmd_build_pod(cfg)
            sizes = ", ".join(f"{v}: {info['n_pod']}" for v, info in out["bases"].items())
            print(f"basis archive at {out['basis_dir']} ({sizes})")
        elif args.command == "train-direct":
            out = cmd_train_direct(cfg)
            print(f"direct surrogate at {out['model']} "
                  f"({out['dataset_rows']} rows, final test mse "
                  f"{out['curves'].test_mse[-1]:.3e})")
        elif args.command == "predict":
            out = cmd_predict(cfg, _parse_params(args.params), args.time)
            print(f"prediction written to {out['field']} "
                  f"(tumor volume {out['tumor_volume']:.3f} mm^3)")
        elif args.command == "train-inverse":
            out = cmd_train_inverse(cfg)
            print(f"inverse surrogate at {out['model']} "
                  f"(mean normalized held-out error {out['mean_normalized_error']:.3f})")
        elif args.command == "estimate":
            if args.no_refine:
                cfg.inverse.refine = False
            report = cmd_estimate(cfg, args.snapshot_t0, args.snapshot_t1,
                                  t0_days=args.t0, t1_days=args.t1)
            for name, value in report["parameters"].items():
                flag = " (clipped)" if report["clipped"][name] else ""
                print(f"{name} = {value:.6g}{flag}")
            print(f"any_clipped = {report['any_clipped']}")
            print(f"refined = {report['refined']}")
        elif args.command == "reproduce":
            out = cmd_reproduce(cfg)
            print(f"metrics written to {out['metrics']}")
            for section, name, value in out["metrics_rows"]:
                print(f"  {section}.{name} = {value:.6g}")
            print(f"total wall time {out['timings']['total']:.1f} s")
    except MissingArtifactError as exc:
        print(f"gbl-rom: error: missing-artifact: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # ConfigError, MeshError, FieldError, PodError, SurrogateError and
        # parameter validation all derive from ValueError
        print(f"gbl-rom: error: invalid-input: {exc}", file=sys.stderr)
        return 1
    except (SolverError, PipelineError) as exc:
        print(f"gbl-rom: error: solver-failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"gbl-rom: error: missing-file: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
