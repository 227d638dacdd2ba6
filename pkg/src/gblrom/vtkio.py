"""Legacy ASCII VTK export of nodal scalars on the tet mesh."""

from __future__ import annotations

from ._text import fnum
from .mesh import Mesh


def write_vtk(path, mesh: Mesh, point_data: dict, comment: str = "gbl-rom export") -> None:
    """UNSTRUCTURED_GRID with one POINT_DATA scalar section per field.

    point_data maps field names to per-vertex arrays. The output is fully
    deterministic (no timestamps), so identical inputs give identical files.
    """
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(comment.replace("\n", " ") + "\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        for v in mesh.vertices:
            fh.write(f"{fnum(v[0])} {fnum(v[1])} {fnum(v[2])}\n")
        fh.write(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}\n")
        for t in mesh.tets:
            fh.write(f"4 {t[0]} {t[1]} {t[2]} {t[3]}\n")
        fh.write(f"CELL_TYPES {mesh.n_tets}\n")
        fh.write("10\n" * mesh.n_tets)
        fh.write(f"POINT_DATA {mesh.n_vertices}\n")
        for name, values in point_data.items():
            if len(values) != mesh.n_vertices:
                raise ValueError(f"field {name} does not match the vertex count")
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for x in values:
                fh.write(f"{fnum(x)}\n")
