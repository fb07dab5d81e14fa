"""Backend selection for the numeric hot paths.

The compiled Cython module is preferred when it imported cleanly; otherwise
the numpy fallback is used.  Set ``GAPRO_NO_EXT=1`` to force the fallback
(used by the benchmark and by tests that pin a backend).
"""

import os

from gapro._kernels import _fallback

if os.environ.get("GAPRO_NO_EXT"):
    _impl = _fallback
    BACKEND = "numpy"
else:
    try:
        from gapro._kernels import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "numpy"

squared_distances = _impl.squared_distances
rbf_kernel_matrix = _impl.rbf_kernel_matrix
box_membership = _impl.box_membership

__all__ = [
    "BACKEND",
    "box_membership",
    "rbf_kernel_matrix",
    "squared_distances",
]
