# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: pairwise distances, RBF Gram matrices, box tests.

Semantics match gapro._kernels._fallback exactly; tests assert equivalence.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def squared_distances(a, b):
    """Pairwise squared euclidean distances between rows of ``a`` and ``b``."""
    cdef bint same = b is a
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] bv = av if same else np.ascontiguousarray(b, dtype=np.float64)
    if av.shape[1] != bv.shape[1]:
        raise ValueError("row dimensionality mismatch")
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], d = av.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    if same:
        for i in range(n):
            out[i, i] = 0.0
            for j in range(i + 1, m):
                acc = 0.0
                for k in range(d):
                    diff = av[i, k] - bv[j, k]
                    acc += diff * diff
                out[i, j] = acc
                out[j, i] = acc
    else:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = av[i, k] - bv[j, k]
                    acc += diff * diff
                out[i, j] = acc
    return out_arr


def rbf_kernel_matrix(a, b, double length_scale, double output_scale):
    """RBF Gram matrix s^2 exp(-d^2 / (2 l^2)) between rows of a and b."""
    out_arr = squared_distances(a, b)
    cdef double[:, ::1] out = out_arr
    cdef double scale = -0.5 / (length_scale * length_scale)
    cdef double s2 = output_scale * output_scale
    cdef Py_ssize_t i, j
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = s2 * exp(out[i, j] * scale)
    return out_arr


def box_membership(positions, mins, maxs):
    """Inclusive point-in-box test returning a (N, K) bool array."""
    cdef double[:, ::1] pos = np.ascontiguousarray(positions, dtype=np.float64)
    cdef double[:, ::1] lo = np.ascontiguousarray(mins, dtype=np.float64)
    cdef double[:, ::1] hi = np.ascontiguousarray(maxs, dtype=np.float64)
    if pos.shape[1] != 3 or lo.shape[1] != 3 or hi.shape[1] != 3:
        raise ValueError("expected 3-d coordinates")
    cdef Py_ssize_t n = pos.shape[0], kk = lo.shape[0]
    out_arr = np.zeros((n, kk), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef double x, y, z
    for i in range(n):
        x = pos[i, 0]
        y = pos[i, 1]
        z = pos[i, 2]
        for k in range(kk):
            if x < lo[k, 0] or x > hi[k, 0]:
                continue
            if y < lo[k, 1] or y > hi[k, 1]:
                continue
            if z < lo[k, 2] or z > hi[k, 2]:
                continue
            out[i, k] = 1
    return out_arr.view(np.bool_)
