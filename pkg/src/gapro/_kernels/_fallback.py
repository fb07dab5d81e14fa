"""Pure numpy implementations of the hot kernels.

Mirrors the signatures of the compiled module ``gapro._kernels._core`` so the
two are interchangeable.
"""

import numpy as np


def squared_distances(a, b):
    """Pairwise squared euclidean distances between rows of ``a`` and ``b``.

    Uses the expansion |x-y|^2 = |x|^2 + |y|^2 - 2 x.y, clipped at zero to
    absorb cancellation error.  When ``a is b`` the diagonal is forced to
    exactly zero.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    same = b is a
    b = a if same else np.ascontiguousarray(b, dtype=np.float64)
    aa = np.einsum("ij,ij->i", a, a)
    bb = aa if same else np.einsum("ij,ij->i", b, b)
    d2 = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    if same:
        np.fill_diagonal(d2, 0.0)
    return d2


def rbf_kernel_matrix(a, b, length_scale, output_scale):
    """RBF Gram matrix s^2 exp(-d^2 / (2 l^2)) between rows of a and b."""
    d2 = squared_distances(a, b)
    d2 *= -0.5 / (length_scale * length_scale)
    np.exp(d2, out=d2)
    d2 *= output_scale * output_scale
    return d2


def box_membership(positions, mins, maxs):
    """Inclusive point-in-box test.

    Returns a (N, K) bool array; entry [n, k] is True when point n lies in
    box k with faces included.
    """
    positions = np.asarray(positions, dtype=np.float64)
    inside = (positions[:, None, :] >= mins[None, :, :]) & (
        positions[:, None, :] <= maxs[None, :, :]
    )
    return inside.all(axis=2)
