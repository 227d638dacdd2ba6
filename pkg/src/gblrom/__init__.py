"""Diffuse-interface tumor growth: full-order solver, POD reduction, neural
surrogates for fast forward prediction, and two-snapshot parameter estimation."""

__version__ = "0.1.0"

from .fields import NodalField, TensorField, gaussian_bump, isotropic_field
from .fom import ParameterSet, SimulationConfig, State, assemble_operators
from .mesh import Mesh, build_box_mesh, load_mesh, save_mesh

__all__ = [
    "__version__",
    "Mesh",
    "build_box_mesh",
    "load_mesh",
    "save_mesh",
    "NodalField",
    "TensorField",
    "gaussian_bump",
    "isotropic_field",
    "ParameterSet",
    "SimulationConfig",
    "State",
    "assemble_operators",
]
