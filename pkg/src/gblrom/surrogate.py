"""Parameter normalization, sampling, datasets, and the two surrogate maps.

The direct map sends (normalized parameters, normalized time) to reduced
tumor coefficients; the inverse map sends two coefficient vectors (the tumor
seen at two instants) back to the normalized parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from scipy.optimize import minimize

from .fom import PARAM_ORDER, PARAMETER_RANGES, ParameterSet
from .mlp import Mlp, forward, init_mlp, input_backward
from .pod import ReducedBasis, project, reconstruct
from .fields import NodalField

log = logging.getLogger(__name__)

# Supply and consumption span two decades, so they are sampled and normalized
# on a log scale; the other four are linear.
LOG_SCALE_PARAMS = ("delta_n", "s_n")


class SurrogateError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationSpec:
    lo: np.ndarray
    hi: np.ndarray
    log_scale: np.ndarray  # bool per parameter, PARAM_ORDER layout

    def __post_init__(self):
        if np.any(self.lo >= self.hi):
            raise SurrogateError("normalization ranges need lo < hi")
        if np.any(self.log_scale & (self.lo <= 0)):
            raise SurrogateError("log scaling requires positive ranges")

    @classmethod
    def from_table(cls) -> "NormalizationSpec":
        lo = np.array([PARAMETER_RANGES[k][0] for k in PARAM_ORDER])
        hi = np.array([PARAMETER_RANGES[k][1] for k in PARAM_ORDER])
        log_scale = np.array([k in LOG_SCALE_PARAMS for k in PARAM_ORDER])
        return cls(lo=lo, hi=hi, log_scale=log_scale)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(),
                "log_scale": self.log_scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(lo=np.array(d["lo"]), hi=np.array(d["hi"]),
                   log_scale=np.array(d["log_scale"], dtype=bool))


def normalize_params(params: ParameterSet, spec: NormalizationSpec,
                     strict: bool = False) -> np.ndarray:
    """Map a parameter set to [0, 1]^6 over the biological ranges.

    Out-of-range values raise in strict mode and are clipped with a warning
    otherwise.
    """
    v = params.as_array()
    below, above = v < spec.lo, v > spec.hi
    if np.any(below | above):
        if strict:
            bad = PARAM_ORDER[int(np.argmax(below | above))]
            raise SurrogateError(f"parameter {bad} outside the normalization range")
        log.warning("clipping out-of-range parameters before normalization")
        v = np.clip(v, spec.lo, spec.hi)
    x = np.where(
        spec.log_scale,
        np.log(np.maximum(v, 1e-300) / spec.lo) / np.log(spec.hi / spec.lo),
        (v - spec.lo) / (spec.hi - spec.lo),
    )
    return x


def denormalize_params(x, spec: NormalizationSpec,
                       clip: bool = False) -> tuple[ParameterSet, np.ndarray]:
    """Inverse of normalize_params. Returns the parameter set and, when clip
    is set, a boolean mask of the components that had to be clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (6,):
        raise SurrogateError("expected 6 normalized values")
    clipped = (x < 0) | (x > 1)
    if clip:
        x = np.clip(x, 0.0, 1.0)
    v = np.where(
        spec.log_scale,
        spec.lo * (spec.hi / spec.lo) ** x,
        spec.lo + x * (spec.hi - spec.lo),
    )
    return ParameterSet.from_array(v), clipped


def sample_parameters(count: int, spec: NormalizationSpec, seed: int) -> list[ParameterSet]:
    """Draw parameter sets over the biological ranges, log-uniform where flagged."""
    if count < 1:
        raise SurrogateError("need at least one sample")
    rng = np.random.default_rng(seed)
    u = rng.random((count, 6))
    out = []
    for row in u:
        p, _ = denormalize_params(row, spec)
        out.append(p)
    return out


@dataclass
class TrainingSet:
    inputs: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise SurrogateError("inputs and targets disagree on the row count")
        n = self.inputs.shape[0]
        joined = np.sort(np.concatenate([self.train_idx, self.test_idx]))
        if not np.array_equal(joined, np.arange(n)):
            raise SurrogateError("train/test split must be disjoint and exhaustive")

    @property
    def x_train(self):
        return self.inputs[self.train_idx]

    @property
    def y_train(self):
        return self.targets[self.train_idx]

    @property
    def x_test(self):
        return self.inputs[self.test_idx]

    @property
    def y_test(self):
        return self.targets[self.test_idx]


def _split(n_rows: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_rows)
    n_test = int(round(test_fraction * n_rows))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def build_direct_dataset(trajectories: list, basis: ReducedBasis,
                         spec: NormalizationSpec, horizon: float,
                         test_fraction: float = 0.25, seed: int = 0,
                         strict: bool = False) -> TrainingSet:
    """Rows of ([normalized parameters, t / horizon], tumor coefficients).

    trajectories: list of (ParameterSet, times, snapshot matrix with one
    column per recorded time). One row per recorded step per set.
    """
    inputs, targets = [], []
    for params, times, snaps in trajectories:
        coeffs = basis.modes.T @ (snaps if basis.weight is None else basis.weight @ snaps)
        p_norm = normalize_params(params, spec, strict=strict)
        for col, t in enumerate(times):
            inputs.append(np.concatenate([p_norm, [t / horizon]]))
            targets.append(coeffs[:, col])
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    train_idx, test_idx = _split(inputs.shape[0], test_fraction, seed)
    return TrainingSet(inputs, targets, train_idx, test_idx, seed)


def build_inverse_dataset(trajectories: list, basis: ReducedBasis,
                          spec: NormalizationSpec, gap_days: float,
                          pairs_per_traj: int, dt_record: float,
                          test_fraction: float = 0.25, seed: int = 0,
                          strict: bool = False) -> TrainingSet:
    """Rows of ([coeffs at t0, coeffs at t0 + gap], normalized parameters).

    Start times are drawn uniformly without replacement over the admissible
    recorded indices (with replacement only if more pairs are requested than
    starts exist); a single pair per trajectory deterministically uses t0 = 0.
    """
    gap_steps = int(round(gap_days / dt_record))
    if gap_steps < 1:
        raise SurrogateError("observation gap must cover at least one recorded step")
    rng = np.random.default_rng(seed)
    inputs, targets = [], []
    for params, times, snaps in trajectories:
        n_rec = snaps.shape[1]
        n_starts = n_rec - gap_steps
        if n_starts < 1:
            raise SurrogateError(
                f"gap of {gap_days} days exceeds the trajectory span "
                f"({times[-1] - times[0]} days)"
            )
        coeffs = basis.modes.T @ (snaps if basis.weight is None else basis.weight @ snaps)
        p_norm = normalize_params(params, spec, strict=strict)
        if pairs_per_traj == 1:
            starts = np.array([0])
        elif pairs_per_traj <= n_starts:
            starts = np.sort(rng.choice(n_starts, size=pairs_per_traj, replace=False))
        else:
            starts = np.sort(rng.integers(0, n_starts, size=pairs_per_traj))
        for t0 in starts:
            inputs.append(np.concatenate([coeffs[:, t0], coeffs[:, t0 + gap_steps]]))
            targets.append(p_norm)
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    train_idx, test_idx = _split(inputs.shape[0], test_fraction, seed)
    return TrainingSet(inputs, targets, train_idx, test_idx, seed)


def default_direct_net(n_pod: int, hidden=(64, 64, 64), slope: float = 0.01,
                       seed: int = 0) -> Mlp:
    return init_mlp([7, *hidden, n_pod], hidden_slope=slope, seed=seed)


def default_inverse_net(n_pod: int, hidden=(64, 64), slope: float = 0.01,
                        seed: int = 0) -> Mlp:
    return init_mlp([2 * n_pod, *hidden, 6], hidden_slope=slope, seed=seed)


def forward_mean(nets, x) -> np.ndarray:
    """Evaluate a network or an ensemble (mean prediction over the members)."""
    if isinstance(nets, Mlp):
        return forward(nets, x)
    out = forward(nets[0], x)
    for net in nets[1:]:
        out = out + forward(net, x)
    return out / len(nets)


def predict_direct_coeffs(nets, params: ParameterSet, t: float,
                          spec: NormalizationSpec, horizon: float) -> np.ndarray:
    x = np.concatenate([normalize_params(params, spec), [t / horizon]])
    return forward_mean(nets, x)


def predict_direct(nets, params: ParameterSet, t: float, basis: ReducedBasis,
                   spec: NormalizationSpec, horizon: float) -> NodalField:
    """Surrogate tumor field at time t: network coefficients lifted on the basis."""
    return reconstruct(predict_direct_coeffs(nets, params, t, spec, horizon),
                       basis, name="phi")


def refine_parameters(nets_direct, observations, spec: NormalizationSpec,
                      horizon: float, x0=None) -> tuple[ParameterSet, np.ndarray]:
    """Polish a parameter estimate by least-squares matching of observed
    reduced coefficients through the forward surrogate.

    observations: list of (time_days, coefficient_vector). The box-constrained
    minimization runs in normalized parameter space, started from the inverse
    network's output (and from the range midpoint as a safeguard); the best
    optimum wins. Returns the refined set and the clipping mask of the start.
    """
    if isinstance(nets_direct, Mlp):
        nets_direct = [nets_direct]
    obs = [(t / horizon, np.asarray(a, dtype=np.float64)) for t, a in observations]

    def objective(x):
        total = 0.0
        grad = np.zeros(6)
        for tn, a in obs:
            xt = np.concatenate([x, [tn]])
            residual = forward_mean(nets_direct, xt) - a
            total += float(residual @ residual)
            pulled = np.zeros(7)
            for net in nets_direct:
                pulled += input_backward(net, xt, residual)
            grad += (2.0 / len(nets_direct)) * pulled[:6]
        return total, grad

    starts = [np.full(6, 0.5)]
    clipped = np.zeros(6, dtype=bool)
    if x0 is not None:
        x0 = np.asarray(x0, dtype=np.float64)
        clipped = (x0 < 0) | (x0 > 1)
        starts.insert(0, np.clip(x0, 0.0, 1.0))
    best = None
    for start in starts:
        result = minimize(objective, start, jac=True, method="L-BFGS-B",
                          bounds=[(0.0, 1.0)] * 6,
                          options={"maxiter": 500, "ftol": 1e-14, "gtol": 1e-10})
        if best is None or result.fun < best.fun:
            best = result
    params, _ = denormalize_params(best.x, spec, clip=True)
    return params, clipped


def estimate_parameters(net_inv: Mlp, phi_t0, phi_t1, basis: ReducedBasis,
                        spec: NormalizationSpec) -> tuple[ParameterSet, np.ndarray]:
    """Recover the parameter set from two tumor observations.

    Outputs are clipped to the biological ranges; the returned mask flags the
    components where clipping fired.
    """
    a0 = project(phi_t0, basis)
    a1 = project(phi_t1, basis)
    x_norm = forward_mean(net_inv, np.concatenate([a0, a1]))
    return denormalize_params(x_norm, spec, clip=True)


def save_network_archive(path, nets, spec: NormalizationSpec,
                         basis_fingerprint: str, extra: dict | None = None) -> None:
    """Single-file archive: weights (one or more ensemble members sharing a
    shape) plus the metadata needed to use them."""
    if isinstance(nets, Mlp):
        nets = [nets]
    meta = {
        "layer_sizes": nets[0].layer_sizes,
        "hidden_slope": nets[0].hidden_slope,
        "n_members": len(nets),
        "normalization": spec.to_dict(),
        "basis_fingerprint": basis_fingerprint,
    }
    if extra:
        meta.update(extra)
    arrays = {"meta_json": np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                         dtype=np.uint8)}
    for m, net in enumerate(nets):
        for k, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"m{m}_w{k}"] = w
            arrays[f"m{m}_b{k}"] = b
    np.savez(path, **arrays)


def load_network_archive(path) -> tuple[list, NormalizationSpec, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta_json"]).decode())
        n_layers = len(meta["layer_sizes"]) - 1
        nets = []
        for m in range(meta.get("n_members", 1)):
            weights = [data[f"m{m}_w{k}"] for k in range(n_layers)]
            biases = [data[f"m{m}_b{k}"] for k in range(n_layers)]
            nets.append(Mlp(weights=weights, biases=biases,
                            hidden_slope=meta["hidden_slope"]))
    spec = NormalizationSpec.from_dict(meta["normalization"])
    return nets, spec, meta
