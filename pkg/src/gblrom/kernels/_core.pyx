# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled element-assembly kernels; same contracts as kernels.reference.

The inner loops run once per Newton iteration of every time step, which makes
them the hot path of the solver. Barycentric moment tables are baked in at
module init and all loops are plain C over the 4-node element arrays.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

from .reference import MOM2 as _MOM2_PY
from .reference import MOM3 as _MOM3_PY
from .reference import MOM4 as _MOM4_PY

cdef double[16] MOM2
cdef double[64] MOM3
cdef double[256] MOM4

_m2 = np.ascontiguousarray(_MOM2_PY, dtype=np.float64).ravel()
_m3 = np.ascontiguousarray(_MOM3_PY, dtype=np.float64).ravel()
_m4 = np.ascontiguousarray(_MOM4_PY, dtype=np.float64).ravel()
for _i in range(16):
    MOM2[_i] = _m2[_i]
for _i in range(64):
    MOM3[_i] = _m3[_i]
for _i in range(256):
    MOM4[_i] = _m4[_i]


def weighted_mass_blocks(double[::1] vols, double[:, ::1] w):
    cdef Py_ssize_t nt = vols.shape[0]
    out_arr = np.empty((nt, 4, 4), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t t, i, j, k
    cdef double acc, v
    for t in range(nt):
        v = vols[t]
        for i in range(4):
            for j in range(4):
                acc = 0.0
                for k in range(4):
                    acc += MOM3[(i * 4 + j) * 4 + k] * w[t, k]
                out[t, i, j] = acc * v
    return out_arr


def squared_weighted_mass_blocks(double[::1] vols, double[:, ::1] p):
    cdef Py_ssize_t nt = vols.shape[0]
    out_arr = np.empty((nt, 4, 4), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t t, i, j, k, l
    cdef double acc, v
    cdef double pp[16]
    for t in range(nt):
        v = vols[t]
        for k in range(4):
            for l in range(4):
                pp[k * 4 + l] = p[t, k] * p[t, l]
        for i in range(4):
            for j in range(4):
                acc = 0.0
                for k in range(16):
                    acc += MOM4[(i * 4 + j) * 16 + k] * pp[k]
                out[t, i, j] = acc * v
    return out_arr


def cubic_load(double[::1] vols, double[:, ::1] p):
    cdef Py_ssize_t nt = vols.shape[0]
    out_arr = np.empty((nt, 4), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t t, i, k, l, m
    cdef double acc, v
    cdef double pt[4]
    for t in range(nt):
        v = vols[t]
        for k in range(4):
            pt[k] = p[t, k]
        for i in range(4):
            acc = 0.0
            for k in range(4):
                for l in range(4):
                    for m in range(4):
                        acc += MOM4[((i * 4 + k) * 4 + l) * 4 + m] * pt[k] * pt[l] * pt[m]
            out[t, i] = acc * v
    return out_arr


def double_well_integral(double[::1] vols, double[:, ::1] p):
    cdef Py_ssize_t nt = vols.shape[0]
    cdef Py_ssize_t t, k, l, m, n
    cdef double s2, s4, total = 0.0
    cdef double pt[4]
    for t in range(nt):
        for k in range(4):
            pt[k] = p[t, k]
        s2 = 0.0
        for k in range(4):
            for l in range(4):
                s2 += MOM2[k * 4 + l] * pt[k] * pt[l]
        s4 = 0.0
        for k in range(4):
            for l in range(4):
                for m in range(4):
                    for n in range(4):
                        s4 += MOM4[((k * 4 + l) * 4 + m) * 4 + n] * pt[k] * pt[l] * pt[m] * pt[n]
        total += vols[t] * (1.0 - 2.0 * s2 + s4)
    return 0.25 * total


def scatter_add(double[::1] out, long[::1] index, values):
    cdef double[::1] vals = np.ascontiguousarray(values, dtype=np.float64).ravel()
    cdef Py_ssize_t i, n = vals.shape[0]
    for i in range(n):
        out[index[i]] += vals[i]
