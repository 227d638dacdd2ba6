"""Conforming tetrahedral meshes: construction, validation, and text IO.

Coordinates are in millimetres. Tets are stored with positive signed volume;
the boundary triangulation is derived at construction time.
"""

from __future__ import annotations

from itertools import permutations

import numpy as np

from ._text import fnum


class MeshError(ValueError):
    """Invalid mesh data (bad indices, degenerate or inverted tets, non-conforming faces)."""


# Local faces of a positively oriented tet, outward-facing.
_LOCAL_FACES = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))

# Kuhn decomposition: one tet per permutation of the axes, all sharing the
# main diagonal of the cell, so neighbouring cells match on shared faces.
_KUHN_PERMS = tuple(permutations(range(3)))


def tet_signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volume of each tet, det(v1-v0, v2-v0, v3-v0)/6."""
    p = vertices[tets]
    e = p[:, 1:] - p[:, :1]
    return np.linalg.det(e) / 6.0


class Mesh:
    """Immutable conforming tet mesh.

    Attributes:
        vertices: (n_vertices, 3) float array, mm.
        tets: (n_tets, 4) int array, positively oriented.
        boundary_faces: (n_faces, 3) int array of outward-oriented triangles
            incident to exactly one tet.
    """

    def __init__(self, vertices, tets, validate: bool = True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.tets = np.ascontiguousarray(tets, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be an (n, 3) array")
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise MeshError("tets must be an (m, 4) array")
        if validate:
            self._validate()
        self.boundary_faces = self._extract_boundary()
        for arr in (self.vertices, self.tets, self.boundary_faces):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    def volumes(self) -> np.ndarray:
        return tet_signed_volumes(self.vertices, self.tets)

    def total_volume(self) -> float:
        return float(self.volumes().sum())

    def cell_size(self) -> float:
        """Mean edge-scale of the mesh, cbrt of the mean tet volume times 6^(1/3)."""
        return float(np.cbrt(6.0 * self.volumes().mean()))

    def _validate(self):
        if not np.isfinite(self.vertices).all():
            raise MeshError("non-finite vertex coordinate")
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= self.n_vertices):
            bad = np.where((self.tets < 0) | (self.tets >= self.n_vertices))[0][0]
            raise MeshError(f"tet {bad} references a vertex out of range")
        vols = self.volumes()
        if np.any(vols <= 0):
            bad = int(np.argmin(vols))
            raise MeshError(
                f"tet {bad} has non-positive volume {vols[bad]:.3e}; "
                "reorient or fix the mesh"
            )
        self._check_conforming()

    def _check_conforming(self):
        faces = self._all_faces_sorted()
        _, counts = np.unique(faces, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("non-conforming mesh: a face is shared by more than two tets")

    def _all_faces_sorted(self) -> np.ndarray:
        faces = np.concatenate([self.tets[:, f] for f in _LOCAL_FACES])
        return np.sort(faces, axis=1)

    def _extract_boundary(self) -> np.ndarray:
        oriented = np.concatenate([self.tets[:, f] for f in _LOCAL_FACES])
        key = np.sort(oriented, axis=1)
        _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return np.ascontiguousarray(oriented[counts[inverse] == 1])


def build_box_mesh(nx: int, ny: int, nz: int, extents, origin=(0.0, 0.0, 0.0)) -> Mesh:
    """Structured box mesh: each hexahedral cell split into 6 tets (Kuhn).

    (nx+1)(ny+1)(nz+1) vertices on a regular grid over `extents` from `origin`.
    """
    nx, ny, nz = int(nx), int(ny), int(nz)
    if min(nx, ny, nz) < 1:
        raise MeshError("subdivision counts must be at least 1")
    extents = np.asarray(extents, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if extents.shape != (3,) or np.any(extents <= 0):
        raise MeshError("extents must be three positive lengths")

    xs = [np.linspace(origin[d], origin[d] + extents[d], (nx, ny, nz)[d] + 1) for d in range(3)]
    X, Y, Z = np.meshgrid(*xs, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                base = np.array([i, j, k])
                for perm in _KUHN_PERMS:
                    walk = [base.copy()]
                    for axis in perm:
                        nxt = walk[-1].copy()
                        nxt[axis] += 1
                        walk.append(nxt)
                    tet = [vid(*w) for w in walk]
                    tets.append(tet)
    tets = np.asarray(tets, dtype=np.int64)

    # Odd permutations produce inverted tets; swap two vertices to fix.
    vols = tet_signed_volumes(vertices, tets)
    flip = vols < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    return Mesh(vertices, tets)


def load_mesh(path, reorient: bool = False) -> Mesh:
    """Read a mesh text file: `vertices N`, N coordinate lines, `tets M`, M index lines.

    Negative-volume tets are an error unless `reorient` is set, in which case
    they are flipped and reported via the return mesh (still validated).
    """
    with open(path) as fh:
        lines = fh.readlines()

    def parse_header(idx, keyword):
        parts = lines[idx].split()
        if len(parts) != 2 or parts[0] != keyword:
            raise MeshError(f"{path}:{idx + 1}: expected '{keyword} <count>'")
        return int(parts[1])

    try:
        n_vertices = parse_header(0, "vertices")
        vertices = np.empty((n_vertices, 3))
        for i in range(n_vertices):
            row = lines[1 + i].split()
            if len(row) != 3:
                raise MeshError(f"{path}:{i + 2}: expected 3 coordinates")
            vertices[i] = [float(v) for v in row]
        t0 = 1 + n_vertices
        n_tets = parse_header(t0, "tets")
        tets = np.empty((n_tets, 4), dtype=np.int64)
        for i in range(n_tets):
            row = lines[t0 + 1 + i].split()
            if len(row) != 4:
                raise MeshError(f"{path}:{t0 + 2 + i}: expected 4 vertex indices")
            tets[i] = [int(v) for v in row]
            if tets[i].min() < 0 or tets[i].max() >= n_vertices:
                raise MeshError(f"{path}:{t0 + 2 + i}: vertex index out of range")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"{path}: truncated or malformed mesh file ({exc})") from exc

    if reorient:
        vols = tet_signed_volumes(vertices, tets)
        flip = vols < 0
        tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    return Mesh(vertices, tets)


def save_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"vertices {mesh.n_vertices}\n")
        for v in mesh.vertices:
            fh.write(f"{fnum(v[0])} {fnum(v[1])} {fnum(v[2])}\n")
        fh.write(f"tets {mesh.n_tets}\n")
        for t in mesh.tets:
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]}\n")
