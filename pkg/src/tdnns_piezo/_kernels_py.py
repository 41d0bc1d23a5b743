"""NumPy/SciPy implementations of the compiled kernels."""

import numpy as np
import scipy.sparse as sp


def element_bilinear(Bi, w, M, Bj):
    """out[t, i, j] = sum_q w[t, q] Bi[t, q, i, :] . M[t] . Bj[t, q, j, :]."""
    nT, nq, ni, ci = Bi.shape
    nj = Bj.shape[2]
    tmp = np.einsum("tab,tqjb->tqaj", M, Bj) * w[:, :, None, None]
    left = Bi.transpose(0, 2, 1, 3).reshape(nT, ni, nq * ci)
    return left @ tmp.reshape(nT, nq * ci, nj)


def scatter_csr(rows, cols, local, n_rows, n_cols):
    """Sum element matrices into CSR arrays; negative indices are skipped."""
    nT, ni, nj = local.shape
    r = np.broadcast_to(rows[:, :, None], (nT, ni, nj)).ravel()
    c = np.broadcast_to(cols[:, None, :], (nT, ni, nj)).ravel()
    keep = (r >= 0) & (c >= 0)
    A = sp.coo_matrix((local.ravel()[keep], (r[keep], c[keep])), shape=(n_rows, n_cols)).tocsr()
    return A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data
