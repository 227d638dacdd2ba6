"""One YAML document drives the whole pipeline; every stage seed derives from
the root seed, so a config plus a seed pins every artifact."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .fom import ParameterSet, SimulationConfig


class ConfigError(ValueError):
    pass


# Fixed stage keys: new stages append, existing numbers never change, so seeds
# stay stable across versions.
_STAGE_KEYS = {
    "pod_sampling": 0,
    "direct_sampling": 1,
    "heldout_sampling": 2,
    "direct_split": 3,
    "inverse_pairs": 4,
    "inverse_split": 5,
    "direct_init": 6,
    "inverse_init": 7,
    "gradcheck": 8,
    "pod_oracle": 9,
}


def stage_seed(root_seed: int, stage: str) -> int:
    key = _STAGE_KEYS[stage]
    return int(np.random.SeedSequence(entropy=root_seed, spawn_key=(key,)).generate_state(1)[0])


@dataclass
class MeshBlock:
    kind: str = "box"
    nx: int = 8
    ny: int = 8
    nz: int = 8
    extents: tuple = (10.0, 10.0, 10.0)
    origin: tuple = (0.0, 0.0, 0.0)
    path: str | None = None


@dataclass
class TensorBlock:
    kind: str = "isotropic"
    value: float = 1.0
    path: str | None = None


@dataclass
class InitialBlock:
    center: tuple = (5.0, 5.0, 5.0)
    sharpness: float = 0.1
    amplitude: float = 2.0
    offset: float = -1.0
    oxygen: float = 1.0


@dataclass
class PodBlock:
    n_parameter_sets: int = 8
    ic: float = 0.95
    inner_product: str = "mass"
    galerkin_check_set: int = 0


@dataclass
class DirectBlock:
    n_parameter_sets: int = 40
    epochs: int = 400
    hidden: tuple = (64, 64, 64)
    history_size: int = 10
    test_fraction: float = 0.25
    n_members: int = 1


@dataclass
class InverseBlock:
    gap_days: float = 20.0
    pairs_per_trajectory: int = 20
    epochs: int = 400
    hidden: tuple = (64, 64)
    history_size: int = 10
    test_fraction: float = 0.25
    refine: bool = True


@dataclass
class RunConfig:
    seed: int = 20260811
    out: str = "out"
    workers: int = 1
    strict_ranges: bool = False
    mesh: MeshBlock = field(default_factory=MeshBlock)
    motility: TensorBlock = field(default_factory=TensorBlock)
    diffusivity: TensorBlock = field(default_factory=lambda: TensorBlock(value=50.0))
    initial: InitialBlock = field(default_factory=InitialBlock)
    simulation: SimulationConfig = field(
        default_factory=lambda: SimulationConfig(dt=0.5, n_steps=60, epsilon=33.0))
    record_every: int = 1
    nominal: ParameterSet = field(default_factory=lambda: ParameterSet(
        nu=0.356, m0=3860.7, kappa=700.4, delta=0.24, delta_n=21041.0, s_n=41978.0))
    stability: ParameterSet = field(default_factory=lambda: ParameterSet(
        nu=0.0, m0=3860.7, kappa=700.4, delta=0.24, delta_n=21041.0, s_n=41978.0))
    pod: PodBlock = field(default_factory=PodBlock)
    direct: DirectBlock = field(default_factory=DirectBlock)
    inverse: InverseBlock = field(default_factory=InverseBlock)
    n_patients: int = 10

    @property
    def horizon(self) -> float:
        return self.simulation.dt * self.simulation.n_steps

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out": self.out,
            "workers": self.workers,
            "strict_ranges": self.strict_ranges,
            "mesh": vars(self.mesh) | {"extents": list(self.mesh.extents),
                                       "origin": list(self.mesh.origin)},
            "tensors": {"motility": vars(self.motility),
                        "diffusivity": vars(self.diffusivity)},
            "initial": vars(self.initial) | {"center": list(self.initial.center)},
            "simulation": {
                "dt": self.simulation.dt,
                "n_steps": self.simulation.n_steps,
                "epsilon": self.simulation.epsilon,
                "newton_tol": self.simulation.newton_tol,
                "newton_max_iter": self.simulation.newton_max_iter,
                "linear_tol": self.simulation.linear_tol,
                "record_every": self.record_every,
            },
            "nominal": vars(self.nominal),
            "stability": vars(self.stability),
            "pod": vars(self.pod),
            "direct": vars(self.direct) | {"hidden": list(self.direct.hidden)},
            "inverse": vars(self.inverse) | {"hidden": list(self.inverse.hidden)},
            "heldout": {"n_patients": self.n_patients},
        }

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def fom_hash(self) -> str:
        """Hash of the blocks a full-order run depends on; training and POD
        settings do not invalidate cached trajectories."""
        d = self.to_dict()
        relevant = {k: d[k] for k in ("mesh", "tensors", "initial", "simulation")}
        return hashlib.sha256(
            json.dumps(relevant, sort_keys=True).encode()).hexdigest()


def _params_from(d: dict, fallback: ParameterSet) -> ParameterSet:
    if d is None:
        return fallback
    return ParameterSet(**{k: float(v) for k, v in d.items()})


def load_config(path) -> RunConfig:
    """Parse and validate a pipeline configuration file."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return config_from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def config_from_dict(raw: dict, base_dir: str = ".") -> RunConfig:
    cfg = RunConfig()
    try:
        cfg.seed = int(raw.get("seed", cfg.seed))
        # Output paths resolve against the working directory; input paths
        # (mesh and tensor files) resolve against the config file below.
        cfg.out = os.path.abspath(str(raw.get("out", cfg.out)))
        cfg.workers = int(raw.get("workers", cfg.workers))
        cfg.strict_ranges = bool(raw.get("strict_ranges", cfg.strict_ranges))

        m = raw.get("mesh", {})
        cfg.mesh = MeshBlock(
            kind=m.get("kind", "box"), nx=int(m.get("nx", 8)), ny=int(m.get("ny", 8)),
            nz=int(m.get("nz", 8)),
            extents=tuple(float(v) for v in m.get("extents", (10.0, 10.0, 10.0))),
            origin=tuple(float(v) for v in m.get("origin", (0.0, 0.0, 0.0))),
            path=m.get("path"),
        )
        t = raw.get("tensors", {})
        cfg.motility = TensorBlock(**t.get("motility", {"value": 1.0}))
        cfg.diffusivity = TensorBlock(**t.get("diffusivity", {"value": 50.0}))
        i = raw.get("initial", {})
        cfg.initial = InitialBlock(
            center=tuple(float(v) for v in i.get("center", (5.0, 5.0, 5.0))),
            sharpness=float(i.get("sharpness", 0.1)),
            amplitude=float(i.get("amplitude", 2.0)),
            offset=float(i.get("offset", -1.0)),
            oxygen=float(i.get("oxygen", 1.0)),
        )
        s = raw.get("simulation", {})
        cfg.simulation = SimulationConfig(
            dt=float(s.get("dt", 0.5)),
            n_steps=int(s.get("n_steps", 60)),
            epsilon=float(s.get("epsilon", 33.0)),
            newton_tol=float(s.get("newton_tol", 1e-9)),
            newton_max_iter=int(s.get("newton_max_iter", 30)),
            linear_tol=float(s.get("linear_tol", 1e-10)),
        )
        cfg.record_every = int(s.get("record_every", 1))
        cfg.nominal = _params_from(raw.get("nominal"), cfg.nominal)
        cfg.stability = _params_from(raw.get("stability"), cfg.stability)
        p = raw.get("pod", {})
        cfg.pod = PodBlock(
            n_parameter_sets=int(p.get("n_parameter_sets", 8)),
            ic=float(p.get("ic", 0.95)),
            inner_product=p.get("inner_product", "mass"),
            galerkin_check_set=int(p.get("galerkin_check_set", 0)),
        )
        d = raw.get("direct", {})
        cfg.direct = DirectBlock(
            n_parameter_sets=int(d.get("n_parameter_sets", 40)),
            epochs=int(d.get("epochs", 400)),
            hidden=tuple(int(v) for v in d.get("hidden", (64, 64, 64))),
            history_size=int(d.get("history_size", 10)),
            test_fraction=float(d.get("test_fraction", 0.25)),
            n_members=int(d.get("n_members", 1)),
        )
        v = raw.get("inverse", {})
        cfg.inverse = InverseBlock(
            gap_days=float(v.get("gap_days", 20.0)),
            pairs_per_trajectory=int(v.get("pairs_per_trajectory", 20)),
            epochs=int(v.get("epochs", 400)),
            hidden=tuple(int(x) for x in v.get("hidden", (64, 64))),
            history_size=int(v.get("history_size", 10)),
            test_fraction=float(v.get("test_fraction", 0.25)),
            refine=bool(v.get("refine", True)),
        )
        cfg.n_patients = int(raw.get("heldout", {}).get("n_patients", 10))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc

    _validate(cfg, base_dir)
    return cfg


def _validate(cfg: RunConfig, base_dir: str) -> None:
    if cfg.workers < 1:
        raise ConfigError("workers must be at least 1")
    if cfg.direct.n_members < 1:
        raise ConfigError("direct.n_members must be at least 1")
    if cfg.record_every < 1:
        raise ConfigError("record_every must be at least 1")
    if not 0 < cfg.pod.ic <= 1:
        raise ConfigError("pod.ic must lie in (0, 1]")
    if cfg.pod.inner_product not in ("mass", "euclidean"):
        raise ConfigError("pod.inner_product must be 'mass' or 'euclidean'")
    if cfg.mesh.kind not in ("box", "file"):
        raise ConfigError("mesh.kind must be 'box' or 'file'")
    for name, block in (("mesh", cfg.mesh), ("motility", cfg.motility),
                        ("diffusivity", cfg.diffusivity)):
        if getattr(block, "kind", "") == "file" or (name == "mesh" and block.path):
            path = block.path
            if path and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            if not path or not os.path.isfile(path):
                raise ConfigError(f"{name}.path does not exist: {block.path}")
            block.path = path
    if not 0 < cfg.direct.test_fraction < 1 or not 0 < cfg.inverse.test_fraction < 1:
        raise ConfigError("test fractions must lie in (0, 1)")
    if cfg.inverse.gap_days <= 0 or cfg.inverse.gap_days > cfg.horizon:
        raise ConfigError("inverse.gap_days must lie in (0, horizon]")
    cfg.nominal.validate(strict=False)
    cfg.stability.validate(strict=False)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
