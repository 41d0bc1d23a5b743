"""Hot assembly kernels, compiled when available.

Set ``TDNNS_PIEZO_PURE=1`` to force the NumPy fallback.
"""

import os

import numpy as np
import scipy.sparse as sp

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("TDNNS_PIEZO_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def element_bilinear(Bi, w, M, Bj, impl=None):
    """Batched element matrices sum_q w Bi^T M Bj, shape (nT, ni, nj).

    ``M`` may be a single (ci, cj) matrix or one per triangle.
    """
    impl = impl or _impl
    Bi = np.ascontiguousarray(Bi, dtype=float)
    Bj = np.ascontiguousarray(Bj, dtype=float)
    w = np.ascontiguousarray(np.broadcast_to(w, Bi.shape[:2]), dtype=float)
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        M = np.broadcast_to(M, (Bi.shape[0],) + M.shape)
    M = np.ascontiguousarray(M)
    return impl.element_bilinear(Bi, w, M, Bj)


def scatter(rows, cols, local, shape, impl=None) -> sp.csr_matrix:
    """Sparse sum of element matrices; dofs < 0 are dropped."""
    impl = impl or _impl
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    local = np.ascontiguousarray(local, dtype=float)
    indptr, indices, data = impl.scatter_csr(rows, cols, local, int(shape[0]), int(shape[1]))
    A = sp.csr_matrix((data, indices, indptr), shape=shape)
    A.sort_indices()
    return A
