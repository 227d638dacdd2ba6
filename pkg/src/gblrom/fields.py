"""Nodal scalar fields and cell-wise SPD tensor fields on a tet mesh, with text IO."""

from __future__ import annotations

import numpy as np

from ._text import fnum
from .mesh import Mesh


class FieldError(ValueError):
    """Invalid field data (shape mismatch, non-finite values, PSD violation)."""


class NodalField:
    """One real value per mesh vertex. Immutable after construction."""

    def __init__(self, values, name: str = "field"):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.name = name
        if self.values.ndim != 1:
            raise FieldError("nodal field values must be a 1-d array")
        if not np.isfinite(self.values).all():
            raise FieldError(f"nodal field '{name}' contains non-finite values")
        self.values.setflags(write=False)

    def __len__(self) -> int:
        return self.values.shape[0]

    def check_on(self, mesh: Mesh) -> None:
        if len(self) != mesh.n_vertices:
            raise FieldError(
                f"field '{self.name}' has {len(self)} values for a mesh "
                f"with {mesh.n_vertices} vertices"
            )


class TensorField:
    """One symmetric positive semi-definite 3x3 tensor per tet.

    role 'T' is the dimensionless motility tensor, role 'D' the nutrient
    diffusivity in mm^2/day. Symmetry is required to 1e-12 relative to the
    largest entry; eigenvalues may not drop below -1e-12 times the trace.
    """

    def __init__(self, tensors, role: str):
        self.tensors = np.ascontiguousarray(tensors, dtype=np.float64)
        if role not in ("T", "D"):
            raise FieldError(f"tensor role must be 'T' or 'D', got {role!r}")
        self.role = role
        if self.tensors.ndim != 3 or self.tensors.shape[1:] != (3, 3):
            raise FieldError("tensor field must be an (m, 3, 3) array")
        if not np.isfinite(self.tensors).all():
            raise FieldError("tensor field contains non-finite entries")
        self._check_spd()
        self.tensors.setflags(write=False)

    def __len__(self) -> int:
        return self.tensors.shape[0]

    def _check_spd(self):
        scale = np.abs(self.tensors).max(axis=(1, 2))
        asym = np.abs(self.tensors - self.tensors.transpose(0, 2, 1)).max(axis=(1, 2))
        if np.any(asym > 1e-12 * np.maximum(scale, 1.0)):
            bad = int(np.argmax(asym))
            raise FieldError(f"tensor {bad} is not symmetric")
        sym = 0.5 * (self.tensors + self.tensors.transpose(0, 2, 1))
        eig = np.linalg.eigvalsh(sym)
        trace = np.trace(sym, axis1=1, axis2=2)
        if np.any(eig[:, 0] < -1e-12 * np.maximum(trace, 0.0) - 1e-300):
            bad = int(np.argmin(eig[:, 0]))
            raise FieldError(
                f"tensor {bad} violates positive semi-definiteness "
                f"(min eigenvalue {eig[bad, 0]:.3e})"
            )

    def check_on(self, mesh: Mesh) -> None:
        if len(self) != mesh.n_tets:
            raise FieldError(
                f"tensor field has {len(self)} tensors for a mesh with {mesh.n_tets} tets"
            )


def isotropic_field(mesh: Mesh, scalar: float, role: str = "T") -> TensorField:
    """scalar times identity on every tet. scalar must be non-negative."""
    scalar = float(scalar)
    if scalar < 0:
        raise FieldError("isotropic tensor scale must be non-negative")
    tensors = np.broadcast_to(scalar * np.eye(3), (mesh.n_tets, 3, 3)).copy()
    return TensorField(tensors, role)


def gaussian_bump(mesh: Mesh, center, sharpness: float, amplitude: float, offset: float,
                  name: str = "phi") -> NodalField:
    """Quartic-exponent bump: amplitude * exp(-sharpness * |v - center|^4) + offset.

    With amplitude 2 and offset -1 this is the standard initial tumor seed,
    +1 at the centre decaying to -1 (pure host).
    """
    center = np.asarray(center, dtype=np.float64)
    for val, label in ((sharpness, "sharpness"), (amplitude, "amplitude"), (offset, "offset")):
        if not np.isfinite(val):
            raise FieldError(f"non-finite {label}")
    if not np.isfinite(center).all():
        raise FieldError("non-finite bump center")
    if sharpness <= 0:
        raise FieldError("bump sharpness must be positive")
    r2 = ((mesh.vertices - center) ** 2).sum(axis=1)
    return NodalField(amplitude * np.exp(-sharpness * r2 ** 2) + offset, name=name)


def load_nodal_field(path, mesh: Mesh | None = None) -> NodalField:
    """Read `field N name` followed by N values, one per line."""
    with open(path) as fh:
        lines = fh.readlines()
    parts = lines[0].split() if lines else []
    if len(parts) != 3 or parts[0] != "field":
        raise FieldError(f"{path}:1: expected 'field <count> <name>'")
    count, name = int(parts[1]), parts[2]
    if len(lines) < 1 + count:
        raise FieldError(f"{path}: expected {count} values, file has {len(lines) - 1}")
    try:
        values = np.array([float(lines[1 + i]) for i in range(count)])
    except ValueError as exc:
        raise FieldError(f"{path}: malformed value ({exc})") from exc
    field = NodalField(values, name=name)
    if mesh is not None:
        field.check_on(mesh)
    return field


def save_nodal_field(field: NodalField, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"field {len(field)} {field.name}\n")
        for v in field.values:
            fh.write(f"{fnum(v)}\n")


def load_tensor_field(path, mesh: Mesh, role: str | None = None) -> TensorField:
    """Read `tensors M role` plus M rows of upper-triangular components a11 a12 a13 a22 a23 a33."""
    with open(path) as fh:
        lines = fh.readlines()
    parts = lines[0].split() if lines else []
    if len(parts) != 3 or parts[0] != "tensors":
        raise FieldError(f"{path}:1: expected 'tensors <count> <role>'")
    count, file_role = int(parts[1]), parts[2]
    role = role or file_role
    if count != mesh.n_tets:
        raise FieldError(
            f"{path}: {count} tensors declared but the mesh has {mesh.n_tets} tets"
        )
    if len(lines) < 1 + count:
        raise FieldError(f"{path}: expected {count} rows, file has {len(lines) - 1}")
    tensors = np.empty((count, 3, 3))
    for i in range(count):
        row = lines[1 + i].split()
        if len(row) != 6:
            raise FieldError(f"{path}:{i + 2}: expected 6 components")
        try:
            a11, a12, a13, a22, a23, a33 = (float(v) for v in row)
        except ValueError as exc:
            raise FieldError(f"{path}:{i + 2}: malformed component ({exc})") from exc
        tensors[i] = [[a11, a12, a13], [a12, a22, a23], [a13, a23, a33]]
    return TensorField(tensors, role)


def save_tensor_field(field: TensorField, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"tensors {len(field)} {field.role}\n")
        for a in field.tensors:
            fh.write(" ".join(fnum(a[i, j]) for i, j in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))) + "\n")
