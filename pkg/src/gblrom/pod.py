"""Two-stage proper orthogonal decomposition of solution snapshots.

Stage 1 compresses each parameter set's trajectory via the method of
snapshots (eigendecomposition of the small correlation matrix). Stage 2
compresses the collection of all stage-1 modes into one basis per variable;
the three variables then share a single dimension, the largest of the three,
with the shorter bases extended by their own next stage-2 modes.

The inner product is the finite-element L2 product (mass-matrix weighted) by
default; a plain Euclidean mode exists for testing against dense SVD oracles.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh, solve_triangular

log = logging.getLogger(__name__)

from ._text import fnum
from .fields import NodalField, load_nodal_field, save_nodal_field

VARIABLES = ("phi", "mu", "nhat")

# Eigenvalues below this fraction of the trace are treated as numerical noise.
RANK_FLOOR = 1e-13


class PodError(ValueError):
    pass


@dataclass
class SnapshotSet:
    """Trajectory of one variable for one parameter set, one column per time step."""

    variable: str
    param_id: int
    data: np.ndarray  # (n_dofs, n_steps + 1)
    inner_product: str = "mass"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise PodError("snapshot data must be a 2-d array (dofs x snapshots)")


@dataclass
class PodResult:
    eigenvalues: np.ndarray   # descending, full spectrum of the correlation matrix
    modes: np.ndarray         # (n_dofs, n_kept) orthonormal in the declared product
    n_by_ic: int              # smallest count whose retained ratio reaches ic
    trace: float

    def retained(self, m: int) -> float:
        return float(self.eigenvalues[:m].sum() / self.trace)


@dataclass
class ReducedBasis:
    variable: str
    modes: np.ndarray         # (n_dofs, n_pod)
    eigenvalues: np.ndarray
    retained_ratio: float
    ic: float
    inner_product: str = "mass"
    weight: object = field(default=None, repr=False)  # sparse matrix or None

    @property
    def n_pod(self) -> int:
        return self.modes.shape[1]

    def gram(self) -> np.ndarray:
        wm = self.modes if self.weight is None else self.weight @ self.modes
        return self.modes.T @ wm


def _correlation(F: np.ndarray, weight) -> np.ndarray:
    WF = F if weight is None else weight @ F
    C = F.T @ WF
    return 0.5 * (C + C.T)


def method_of_snapshots(F: np.ndarray, ic: float, weight=None,
                        rank_floor: float = RANK_FLOOR) -> PodResult:
    """POD via the correlation matrix F^t F (in the chosen inner product).

    Keeps every mode above the numerical-rank floor; n_by_ic marks the
    smallest count retaining at least the fraction ic of the trace.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] == 0:
        raise PodError("snapshot matrix must have at least one column")
    if not 0 < ic <= 1:
        raise PodError("information content ic must lie in (0, 1]")
    C = _correlation(F, weight)
    trace = float(np.trace(C))
    if trace <= 0:
        raise PodError("snapshot matrix is identically zero")
    lam, vec = eigh(C)
    lam, vec = lam[::-1].copy(), vec[:, ::-1].copy()
    if lam[-1] < -1e-12 * trace:
        raise PodError(f"correlation matrix has a negative eigenvalue {lam[-1]:.3e}")
    lam = np.maximum(lam, 0.0)

    kept = int(np.sum(lam > rank_floor * trace))
    kept = max(kept, 1)
    cumulative = np.cumsum(lam[:kept]) / trace
    # A strict >= comparison at ic=1 would run past the numerical rank, so we
    # allow a one-ulp-scale slack and cap at the rank.
    reaching = np.nonzero(cumulative >= ic * (1.0 - 1e-12))[0]
    n_by_ic = int(reaching[0]) + 1 if reaching.size else kept

    modes = F @ (vec[:, :kept] / np.sqrt(lam[:kept]))
    modes = _polish(modes, weight)
    return PodResult(eigenvalues=lam, modes=modes, n_by_ic=n_by_ic, trace=trace)


def _polish(modes: np.ndarray, weight) -> np.ndarray:
    """Cholesky re-orthonormalization of the computed modes.

    In exact arithmetic the method-of-snapshots modes are already orthonormal
    and this is the identity; in floats the deep-tail modes (eigenvalues near
    the trace times machine precision) drift, and a triangular correction
    restores the Gram matrix without leaving the span or reordering modes.
    """
    wm = modes if weight is None else weight @ modes
    gram = modes.T @ wm
    n = gram.shape[0]
    while n > 1:
        try:
            chol = np.linalg.cholesky(gram[:n, :n])
            break
        except np.linalg.LinAlgError:
            n -= 1
    else:
        return modes
    return solve_triangular(chol, modes[:, :n].T, lower=True).T


def pod_stage1(snapshots: SnapshotSet, ic: float, weight=None) -> ReducedBasis:
    """Per-parameter-set basis at the given information content."""
    result = method_of_snapshots(snapshots.data, ic, weight=weight)
    n = result.n_by_ic
    return ReducedBasis(
        variable=snapshots.variable,
        modes=result.modes[:, :n],
        eigenvalues=result.eigenvalues[:n],
        retained_ratio=result.retained(n),
        ic=ic,
        inner_product=snapshots.inner_product,
        weight=weight,
    )


def pod_stage2(bases: list[ReducedBasis], ic: float, weight=None) -> PodResult:
    """Second decomposition over the matrix collecting all stage-1 modes.

    Returns the full spectrum so callers can pad each variable's basis up to
    the shared dimension. Stage-1 modes enter unweighted (each with unit norm).
    """
    if not bases:
        raise PodError("stage 2 needs at least one stage-1 basis")
    variable = bases[0].variable
    n_dofs = bases[0].modes.shape[0]
    for b in bases:
        if b.variable != variable or b.modes.shape[0] != n_dofs:
            raise PodError("stage-1 bases must share the variable and nodal dimension")
    stacked = np.hstack([b.modes for b in bases])
    return method_of_snapshots(stacked, ic, weight=weight)


def project(values, basis: ReducedBasis) -> np.ndarray:
    """Coefficients of the orthogonal projection onto the basis."""
    v = values.values if isinstance(values, NodalField) else np.asarray(values)
    if v.shape[0] != basis.modes.shape[0]:
        raise PodError(
            f"field has {v.shape[0]} dofs, basis expects {basis.modes.shape[0]}"
        )
    wv = v if basis.weight is None else basis.weight @ v
    return basis.modes.T @ wv


def reconstruct(coeffs, basis: ReducedBasis, name: str = "field") -> NodalField:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[0] != basis.n_pod:
        raise PodError(f"expected {basis.n_pod} coefficients, got {coeffs.shape[0]}")
    return NodalField(basis.modes @ coeffs, name=name)


def pooled_retained_ratio(modes: np.ndarray, snapshot_sets: list[SnapshotSet],
                          weight=None) -> float:
    """Energy fraction of the pooled original snapshots captured by the modes."""
    total = 0.0
    captured = 0.0
    for s in snapshot_sets:
        WF = s.data if weight is None else weight @ s.data
        total += float(np.sum(s.data * WF))
        coeffs = modes.T @ WF
        captured += float(np.sum(coeffs * coeffs))
    if total <= 0:
        raise PodError("pooled snapshots are identically zero")
    return captured / total


def build_combined_basis(snapshots_by_var: dict[str, list[SnapshotSet]], ic: float,
                         weight=None) -> dict[str, ReducedBasis]:
    """Full two-stage POD across parameter sets, one shared dimension for all variables.

    Per variable, the kept count is the stage-2 ic count, raised if needed so
    the basis also retains at least ic of the pooled original snapshot energy
    (the two-stage composition alone does not guarantee that). The shared
    dimension is the maximum over variables, shorter bases padded with their
    own subsequent stage-2 modes.
    """
    stage2 = {}
    n_needed = {}
    for var, sets in snapshots_by_var.items():
        stage1 = [pod_stage1(s, ic, weight=weight) for s in sets]
        result = pod_stage2(stage1, ic, weight=weight)
        n = result.n_by_ic
        while (n < result.modes.shape[1]
               and pooled_retained_ratio(result.modes[:, :n], sets, weight) < ic):
            n += 1
        stage2[var] = result
        n_needed[var] = n

    n_shared = max(n_needed.values())
    combined = {}
    for var, sets in snapshots_by_var.items():
        result = stage2[var]
        n = min(n_shared, result.modes.shape[1])
        if n < n_shared:
            log.warning("variable %s has rank %d, below the shared dimension %d",
                        var, n, n_shared)
        modes = result.modes[:, :n]
        combined[var] = ReducedBasis(
            variable=var,
            modes=modes,
            eigenvalues=result.eigenvalues[:n],
            retained_ratio=pooled_retained_ratio(modes, sets, weight),
            ic=ic,
            inner_product=sets[0].inner_product,
            weight=weight,
        )
    return combined


def save_basis_archive(directory, bases: dict[str, ReducedBasis]) -> None:
    """One subdirectory per variable: a `meta` text file plus one field file per mode."""
    os.makedirs(directory, exist_ok=True)
    for var, basis in bases.items():
        sub = os.path.join(directory, var)
        os.makedirs(sub, exist_ok=True)
        with open(os.path.join(sub, "meta"), "w") as fh:
            fh.write(f"variable {var}\n")
            fh.write(f"n_pod {basis.n_pod}\n")
            fh.write(f"ic {fnum(basis.ic)}\n")
            fh.write(f"inner_product {basis.inner_product}\n")
            fh.write(f"retained_ratio {fnum(basis.retained_ratio)}\n")
            fh.write("eigenvalues " + " ".join(fnum(v) for v in basis.eigenvalues) + "\n")
        for i in range(basis.n_pod):
            save_nodal_field(NodalField(basis.modes[:, i], name=f"mode_{i:04d}"),
                             os.path.join(sub, f"mode_{i:04d}.txt"))


def load_basis_archive(directory, weight=None) -> dict[str, ReducedBasis]:
    bases = {}
    for var in sorted(os.listdir(directory)):
        sub = os.path.join(directory, var)
        meta_path = os.path.join(sub, "meta")
        if not os.path.isfile(meta_path):
            continue
        meta = {}
        with open(meta_path) as fh:
            for line in fh:
                key, _, rest = line.partition(" ")
                meta[key] = rest.strip()
        n_pod = int(meta["n_pod"])
        modes = np.column_stack([
            load_nodal_field(os.path.join(sub, f"mode_{i:04d}.txt")).values
            for i in range(n_pod)
        ])
        bases[var] = ReducedBasis(
            variable=meta["variable"],
            modes=modes,
            eigenvalues=np.array([float(v) for v in meta["eigenvalues"].split()]),
            retained_ratio=float(meta["retained_ratio"]),
            ic=float(meta["ic"]),
            inner_product=meta["inner_product"],
            weight=weight,
        )
    if not bases:
        raise PodError(f"no basis found under {directory}")
    return bases


def basis_fingerprint(directory) -> str:
    """Stable hash of a basis archive, stored alongside trained networks."""
    digest = hashlib.sha256()
    for root, dirs, files in sorted(os.walk(directory)):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(root, name)
            digest.update(os.path.relpath(path, directory).encode())
            with open(path, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()


def write_coefficient_csv(path, times, coeffs: np.ndarray) -> None:
    """Trajectory of reduced coefficients: time,a_1,...,a_N rows."""
    coeffs = np.atleast_2d(coeffs)
    with open(path, "w") as fh:
        fh.write("time," + ",".join(f"a_{i + 1}" for i in range(coeffs.shape[1])) + "\n")
        for t, row in zip(times, coeffs):
            fh.write(f"{fnum(t)}," + ",".join(fnum(v) for v in row) + "\n")
