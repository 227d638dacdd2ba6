"""Full-order semi-implicit P1 solver for the coupled phase-field/nutrient system.

Each time step is split in two stages. The nutrient equation is linear in the
new oxygen field given the old tumor field, so it is solved first. The tumor
and chemical-potential fields are then advanced together by Newton iteration
on the cubic term of the convex/concave-split double-well potential; the
concave part is taken explicitly, which keeps the discrete free energy
non-increasing without a time-step restriction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse import bmat, csr_matrix
from scipy.sparse.linalg import LinearOperator, cg, splu

from . import kernels
from ._text import fnum
from .fields import NodalField, TensorField
from .mesh import Mesh

log = logging.getLogger(__name__)

# Biological ranges for the six patient parameters (units noted on ParameterSet).
PARAMETER_RANGES = {
    "nu": (1.2e-2, 0.5),
    "m0": (1.38e3, 5.03e3),
    "kappa": (1.06e2, 1.53e3),
    "delta": (0.1, 0.33),
    "delta_n": (1.0e3, 1.0e5),
    "s_n": (1.0e3, 1.0e5),
}

PARAM_ORDER = ("nu", "m0", "kappa", "delta", "delta_n", "s_n")


class SolverError(RuntimeError):
    pass


class NewtonError(SolverError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class ParameterSet:
    """Patient growth parameters.

    nu: proliferation rate, 1/day. m0: inter-phase friction, Pa day/mm^2.
    kappa: tissue Young modulus, Pa. delta: hypoxia threshold, dimensionless.
    delta_n: oxygen consumption rate, 1/day. s_n: oxygen supply rate, 1/day.
    """

    nu: float
    m0: float
    kappa: float
    delta: float
    delta_n: float
    s_n: float

    def validate(self, strict: bool = False) -> None:
        # nu >= 0 rather than > 0: the stability fixtures run with growth off.
        if not (self.nu >= 0 and self.m0 > 0 and self.kappa > 0
                and self.delta_n > 0 and self.s_n > 0):
            raise ValueError(f"non-positive parameter in {self}")
        if not 0 < self.delta < 1:
            raise ValueError(f"hypoxia threshold delta={self.delta} outside (0, 1)")
        if strict:
            for name, (lo, hi) in PARAMETER_RANGES.items():
                v = getattr(self, name)
                if not lo <= v <= hi:
                    raise ValueError(
                        f"parameter {name}={v} outside biological range [{lo}, {hi}]"
                    )

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in PARAM_ORDER])

    @classmethod
    def from_array(cls, values) -> "ParameterSet":
        return cls(**dict(zip(PARAM_ORDER, (float(v) for v in values))))


@dataclass(frozen=True)
class SimulationConfig:
    """Time discretization and solver tolerances.

    epsilon carries the interface energy; its square multiplies the gradient
    term, so its unit is mm * sqrt(Pa). It is fixed a priori and never varies
    across parameter samples.
    """

    dt: float
    n_steps: int
    epsilon: float
    newton_tol: float = 1e-9
    newton_max_iter: int = 30
    linear_tol: float = 1e-10

    def __post_init__(self):
        if self.dt <= 0 or self.epsilon <= 0:
            raise ValueError("dt and epsilon must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if not (0 < self.newton_tol < 1 and 0 < self.linear_tol < 1):
            raise ValueError("tolerances must lie in (0, 1)")


@dataclass
class State:
    phi: NodalField
    mu: NodalField
    nhat: NodalField
    time: float

    def check_on(self, mesh: Mesh) -> None:
        for f in (self.phi, self.mu, self.nhat):
            f.check_on(mesh)

    def soft_bound_violation(self) -> float:
        """How far phi and nhat stray outside their expected bands (0 if inside)."""
        phi_excess = max(0.0, float(np.max(np.abs(self.phi.values))) - 1.1)
        n = self.nhat.values
        n_excess = max(0.0, float(np.max(n)) - 1.05, float(-0.05 - np.min(n)))
        return max(phi_excess, n_excess)


@dataclass(frozen=True)
class EnergyReport:
    time: float
    free_energy: float
    total_mass: float
    tumor_volume: float


def default_epsilon(cell_size: float, kappa: float) -> float:
    """Interface parameter giving a diffuse interface about three cells wide."""
    return 3.0 * cell_size * float(np.sqrt(kappa))


# Pointwise constitutive functions (vectorized over numpy arrays).

def double_well(phi):
    """Mixing energy density with minima at the pure phases: (1 - phi^2)^2 / 4."""
    return 0.25 * (1.0 - np.asarray(phi) ** 2) ** 2


def double_well_prime(phi):
    phi = np.asarray(phi)
    return phi ** 3 - phi


def convex_part_prime(phi):
    """Derivative of the convex split (phi^4 + 1)/4, treated implicitly."""
    return np.asarray(phi) ** 3


def concave_part_prime(phi):
    """Derivative of the concave split -phi^2/2, treated explicitly."""
    return -np.asarray(phi)


def proliferation_gate(phi):
    """Clamp of (1 + phi)/2 to [0, 1]: proliferation only where tumor is present."""
    return np.clip(0.5 * (1.0 + np.asarray(phi)), 0.0, 1.0)


def growth_rate(phi, nhat, params: ParameterSet):
    """Net mass-exchange rate nu * (nhat - delta) * gate(phi), in 1/day."""
    return params.nu * (np.asarray(nhat) - params.delta) * proliferation_gate(phi)


class Operators:
    """Sparse P1 operators plus the element data the nonlinear kernels need.

    All matrices share one sparsity pattern, so reassembling a state-dependent
    weighted mass only touches the CSR data array.
    """

    def __init__(self, mesh: Mesh, motility: TensorField, diffusivity: TensorField):
        motility.check_on(mesh)
        diffusivity.check_on(mesh)
        if motility.role != "T" or diffusivity.role != "D":
            raise ValueError("expected roles T (motility) and D (diffusivity)")
        self.mesh = mesh
        self.tets = mesh.tets
        self.vols = mesh.volumes()
        n = mesh.n_vertices

        # Barycentric gradients: rows of the inverse edge matrix, transposed.
        p = mesh.vertices[self.tets]
        edges = p[:, 1:] - p[:, :1]
        ginv = np.linalg.inv(edges).transpose(0, 2, 1)
        self.grads = np.concatenate([-ginv.sum(axis=1, keepdims=True), ginv], axis=1)

        self._shape = (n, n)
        rows = np.broadcast_to(self.tets[:, :, None], (mesh.n_tets, 4, 4))
        cols = np.broadcast_to(self.tets[:, None, :], (mesh.n_tets, 4, 4))
        pattern = csr_matrix(
            (np.ones(rows.size), (rows.ravel(), cols.ravel())), shape=(n, n)
        )
        pattern.sum_duplicates()
        pattern.sort_indices()
        self._indices = pattern.indices
        self._indptr = pattern.indptr
        self.nnz = pattern.nnz
        row_of_nz = np.repeat(np.arange(n), np.diff(self._indptr))
        keys = row_of_nz.astype(np.int64) * n + self._indices
        self._blk2csr = np.searchsorted(keys, rows.ravel().astype(np.int64) * n + cols.ravel())

        mass_blocks = (np.ones((4, 4)) + np.eye(4)) / 20.0 * self.vols[:, None, None]
        self.mass = self.csr_of(self._accumulate(mass_blocks))
        self.stiff = self.csr_of(self._accumulate(
            np.einsum("tic,tjc->tij", self.grads, self.grads) * self.vols[:, None, None]
        ))
        self.stiff_motility = self.csr_of(self._accumulate(
            np.einsum("tic,tcd,tjd->tij", self.grads, motility.tensors, self.grads)
            * self.vols[:, None, None]
        ))
        self.stiff_diffusivity = self.csr_of(self._accumulate(
            np.einsum("tic,tcd,tjd->tij", self.grads, diffusivity.tensors, self.grads)
            * self.vols[:, None, None]
        ))
        self.mass_vec = self.mass @ np.ones(n)
        self.volume = float(self.vols.sum())
        self._mass_solve = None

    def csr_of(self, data: np.ndarray) -> csr_matrix:
        return csr_matrix((data, self._indices, self._indptr), shape=self._shape)

    def _accumulate(self, blocks: np.ndarray) -> np.ndarray:
        data = np.zeros(self.nnz)
        kernels.scatter_add(data, self._blk2csr, blocks)
        return data

    def _per_tet(self, nodal: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(nodal[self.tets])

    def weighted_mass_data(self, w: np.ndarray) -> np.ndarray:
        """CSR data of the matrix (w_h u, v) for P1 nodal weights w."""
        return self._accumulate(kernels.weighted_mass_blocks(self.vols, self._per_tet(w)))

    def squared_weighted_mass_data(self, p: np.ndarray) -> np.ndarray:
        """CSR data of (p_h^2 u, v), exact for the P1 interpolant p_h."""
        return self._accumulate(
            kernels.squared_weighted_mass_blocks(self.vols, self._per_tet(p))
        )

    def cubic_load_vec(self, p: np.ndarray) -> np.ndarray:
        """Assembled load (p_h^3, v), the implicit convex part of the potential."""
        blocks = kernels.cubic_load(self.vols, self._per_tet(p))
        return np.bincount(self.tets.ravel(), weights=blocks.ravel(),
                           minlength=self.mesh.n_vertices)

    def double_well_integral(self, p: np.ndarray) -> float:
        return kernels.double_well_integral(self.vols, self._per_tet(p))

    def mass_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._mass_solve is None:
            self._mass_solve = splu(self.mass.tocsc())
        return self._mass_solve.solve(rhs)


def assemble_operators(mesh: Mesh, motility: TensorField, diffusivity: TensorField) -> Operators:
    return Operators(mesh, motility, diffusivity)


def free_energy(phi, ops: Operators, kappa: float, epsilon: float) -> float:
    """kappa * integral of the double well plus epsilon^2/2 times the gradient energy."""
    p = phi.values if isinstance(phi, NodalField) else np.asarray(phi)
    return kappa * ops.double_well_integral(p) + 0.5 * epsilon ** 2 * float(p @ (ops.stiff @ p))


def total_mass(phi, ops: Operators) -> float:
    p = phi.values if isinstance(phi, NodalField) else np.asarray(phi)
    return float(ops.mass_vec @ p)


def tumor_volume(phi, ops: Operators) -> float:
    """Integral of the tumor volume fraction (1 + phi)/2, in mm^3."""
    return 0.5 * (ops.volume + total_mass(phi, ops))


def energy_report(state: State, params: ParameterSet, config: SimulationConfig,
                  ops: Operators) -> EnergyReport:
    return EnergyReport(
        time=state.time,
        free_energy=free_energy(state.phi, ops, params.kappa, config.epsilon),
        total_mass=total_mass(state.phi, ops),
        tumor_volume=tumor_volume(state.phi, ops),
    )


def initial_state(ops: Operators, phi0: NodalField, oxygen0: float = 1.0,
                  params: ParameterSet | None = None,
                  config: SimulationConfig | None = None) -> State:
    """Starting state: given tumor field, uniform oxygen, consistent chemical potential.

    The initial mu only seeds the first Newton solve, so the variational
    derivative of the free energy at phi0 is the natural choice when kappa
    and epsilon are known, zero otherwise.
    """
    phi0.check_on(ops.mesh)
    p = phi0.values
    if params is not None and config is not None:
        rhs = (config.epsilon ** 2 * (ops.stiff @ p)
               + params.kappa * (ops.cubic_load_vec(p) - ops.mass @ p))
        mu = ops.mass_solve(rhs)
    else:
        mu = np.zeros_like(p)
    nhat = np.full_like(p, float(oxygen0))
    return State(phi=NodalField(p, "phi"), mu=NodalField(mu, "mu"),
                 nhat=NodalField(nhat, "nhat"), time=0.0)


def _solve_spd(A: csr_matrix, b: np.ndarray, x0: np.ndarray, rtol: float) -> np.ndarray:
    precond = LinearOperator(A.shape, matvec=lambda v: v / A.diagonal())
    x, info = cg(A, b, x0=x0, rtol=rtol, atol=0.0, maxiter=10 * A.shape[0], M=precond)
    if info > 0:
        log.warning("CG stalled after %d iterations, falling back to direct solve", info)
        return splu(A.tocsc()).solve(b)
    if info < 0:
        raise SolverError("conjugate gradient solver failed on the nutrient system")
    return x


def step(state: State, params: ParameterSet, config: SimulationConfig, ops: Operators,
         newton_trace: list | None = None) -> State:
    """Advance one time step of the split scheme.

    Stage 1 solves the linear SPD nutrient system (implicit in the new oxygen,
    lagged tumor field). Stage 2 runs Newton on the coupled tumor/potential
    block; only the cubic term and its weighted-mass Jacobian are rebuilt per
    iteration. Raises NewtonError if the residual does not reach newton_tol.
    """
    dt = config.dt
    p0 = state.phi.values
    n0 = state.nhat.values
    gate0 = proliferation_gate(p0)
    M = ops.mass

    # Stage 1: nutrient. All terms with the unknown go to the left-hand side.
    gate_mass_data = ops.weighted_mass_data(gate0)
    a_data = (M.data / dt + ops.stiff_diffusivity.data
              + (params.s_n / 3.0) * ops.weighted_mass_data(2.0 - p0)
              + params.delta_n * gate_mass_data)
    b = M @ (n0 / dt + (params.s_n / 3.0) * (2.0 - p0))
    n_new = _solve_spd(ops.csr_of(a_data), b, n0, config.linear_tol)

    # Growth source for the tumor equation, fixed during the Newton loop.
    growth = params.nu * (ops.csr_of(gate_mass_data) @ n_new - params.delta * (M @ gate0))

    eps2 = config.epsilon ** 2
    kappa = params.kappa
    flux = ops.stiff_motility * (1.0 / params.m0)
    mass_dt = M * (1.0 / dt)
    concave_rhs = kappa * (M @ p0)

    p = p0.copy()
    m = state.mu.values.copy()
    residuals = []
    for iteration in range(config.newton_max_iter + 1):
        r_a = mass_dt @ (p - p0) + flux @ m - growth
        r_b = M @ m - eps2 * (ops.stiff @ p) - kappa * ops.cubic_load_vec(p) + concave_rhs
        res = float(np.sqrt(r_a @ r_a + r_b @ r_b))
        residuals.append(res)
        if res < config.newton_tol:
            break
        if iteration == config.newton_max_iter:
            raise NewtonError(
                f"Newton did not reach {config.newton_tol:g} in "
                f"{config.newton_max_iter} iterations (last residual {res:.3e})",
                residual=res,
            )
        jac_lower = ops.csr_of(-eps2 * ops.stiff.data
                               - 3.0 * kappa * ops.squared_weighted_mass_data(p))
        jac = bmat([[mass_dt, flux], [jac_lower, M]], format="csc")
        delta = splu(jac).solve(np.concatenate([-r_a, -r_b]))
        p += delta[: p.size]
        m += delta[p.size:]
    if newton_trace is not None:
        newton_trace.append(np.array(residuals))

    return State(phi=NodalField(p, "phi"), mu=NodalField(m, "mu"),
                 nhat=NodalField(n_new, "nhat"), time=state.time + dt)


def run(initial: State, params: ParameterSet, config: SimulationConfig,
        ops: Operators, record_every: int = 1,
        newton_trace: list | None = None) -> tuple[list[State], list[EnergyReport]]:
    """Run n_steps steps, recording states and diagnostics every record_every
    steps (step 0 and the final step are always included)."""
    if record_every < 1:
        raise ValueError("record_every must be at least 1")
    params.validate()
    initial.check_on(ops.mesh)
    states = [initial]
    reports = [energy_report(initial, params, config, ops)]
    current = initial
    for j in range(1, config.n_steps + 1):
        current = step(current, params, config, ops, newton_trace=newton_trace)
        if j % record_every == 0 or j == config.n_steps:
            states.append(current)
            reports.append(energy_report(current, params, config, ops))
    return states, reports


def write_diagnostics_csv(reports: list[EnergyReport], path) -> None:
    with open(path, "w") as fh:
        fh.write("time,free_energy,total_mass,tumor_volume\n")
        for r in reports:
            fh.write(f"{fnum(r.time)},{fnum(r.free_energy)},{fnum(r.total_mass)},{fnum(r.tumor_volume)}\n")
