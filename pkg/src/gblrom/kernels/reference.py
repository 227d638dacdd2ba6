"""Vectorized numpy implementations of the per-element assembly kernels.

P1 fields on a tet are linear combinations of the barycentric coordinates, so
every integrand below is a polynomial in them. Moments of barycentric
monomials over a tet are exact:

    integral of l1^a l2^b l3^c l4^d dV = 6 V a! b! c! d! / (a+b+c+d+3)!

The degree-2/3/4 moment tables divided by the element volume are precomputed
once; all kernels are exact quadrature, which is what makes the convex-split
time scheme provably energy-decreasing at the discrete level.
"""

from __future__ import annotations

from math import factorial

import numpy as np


def _moment_table(order: int) -> np.ndarray:
    shape = (4,) * order
    table = np.empty(shape)
    denom = factorial(order + 3)
    for idx in np.ndindex(*shape):
        counts = np.bincount(idx, minlength=4)
        num = 6
        for c in counts:
            num *= factorial(c)
        table[idx] = num / denom
    return table


MOM2 = _moment_table(2)
MOM3 = _moment_table(3)
MOM4 = _moment_table(4)


def weighted_mass_blocks(vols: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Element blocks of (w_h u, v) for a P1 weight with nodal values w.

    vols: (nt,) tet volumes; w: (nt, 4) weight at the tet's vertices.
    Returns (nt, 4, 4).
    """
    return np.einsum("ijk,tk->tij", MOM3, w) * vols[:, None, None]


def squared_weighted_mass_blocks(vols: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Element blocks of (p_h^2 u, v); the Jacobian core of the cubic term."""
    return np.einsum("ijkl,tk,tl->tij", MOM4, p, p) * vols[:, None, None]


def cubic_load(vols: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Element load vectors of (p_h^3, v). Returns (nt, 4)."""
    return np.einsum("iklm,tk,tl,tm->ti", MOM4, p, p, p) * vols[:, None]


def double_well_integral(vols: np.ndarray, p: np.ndarray) -> float:
    """Exact integral of (1 - p_h^2)^2 / 4 over the mesh."""
    s2 = np.einsum("kl,tk,tl->t", MOM2, p, p)
    s4 = np.einsum("klmn,tk,tl,tm,tn->t", MOM4, p, p, p, p)
    return float(0.25 * np.sum(vols * (1.0 - 2.0 * s2 + s4)))


def scatter_add(out: np.ndarray, index: np.ndarray, values: np.ndarray) -> None:
    """Accumulate flattened element blocks into CSR data slots."""
    out += np.bincount(index, weights=values.ravel(), minlength=out.shape[0])
