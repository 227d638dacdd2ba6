import numpy as np
import pytest

from gblrom.fields import gaussian_bump, isotropic_field
from gblrom.fom import ParameterSet, SimulationConfig, assemble_operators, initial_state
from gblrom.mesh import build_box_mesh

NOMINAL = ParameterSet(nu=0.356, m0=3860.7, kappa=700.4, delta=0.24,
                       delta_n=21041.0, s_n=41978.0)


@pytest.fixture(scope="session")
def small_problem():
    """6x6x6 box with isotropic tensors and a centred tumor seed."""
    mesh = build_box_mesh(6, 6, 6, [10.0, 10.0, 10.0])
    motility = isotropic_field(mesh, 1.0, "T")
    diffusivity = isotropic_field(mesh, 50.0, "D")
    ops = assemble_operators(mesh, motility, diffusivity)
    phi0 = gaussian_bump(mesh, [5.0, 5.0, 5.0], 0.1, 2.0, -1.0)
    return mesh, ops, phi0


@pytest.fixture(scope="session")
def small_config():
    h = 10.0 / 6.0
    return SimulationConfig(dt=0.5, n_steps=20, epsilon=h * np.sqrt(NOMINAL.kappa))


@pytest.fixture(scope="session")
def nominal_run(small_problem, small_config):
    """One 20-step reference trajectory with growth on, reused across tests."""
    from gblrom.fom import run

    mesh, ops, phi0 = small_problem
    state0 = initial_state(ops, phi0, params=NOMINAL, config=small_config)
    trace = []
    states, reports = run(state0, NOMINAL, small_config, ops, newton_trace=trace)
    return states, reports, trace
