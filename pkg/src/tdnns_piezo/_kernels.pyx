# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled element-integration and sparse-scatter kernels."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()


def element_bilinear(const double[:, :, :, ::1] Bi, const double[:, ::1] w,
                     const double[:, :, ::1] M, const double[:, :, :, ::1] Bj):
    """out[t, i, j] = sum_q w[t, q] Bi[t, q, i, :] . M[t] . Bj[t, q, j, :]."""
    cdef Py_ssize_t nT = Bi.shape[0], nq = Bi.shape[1], ni = Bi.shape[2]
    cdef Py_ssize_t ci = Bi.shape[3], nj = Bj.shape[2], cj = Bj.shape[3]
    cdef Py_ssize_t t, q, i, j, a, b
    cdef double s, wq
    out_arr = np.zeros((nT, ni, nj))
    cdef double[:, :, ::1] out = out_arr
    cdef double *tmp = <double *> malloc(nj * ci * sizeof(double))
    if tmp == NULL:
        raise MemoryError()
    try:
        with nogil:
            for t in range(nT):
                for q in range(nq):
                    wq = w[t, q]
                    if wq == 0.0:
                        continue
                    for j in range(nj):
                        for a in range(ci):
                            s = 0.0
                            for b in range(cj):
                                s = s + M[t, a, b] * Bj[t, q, j, b]
                            tmp[j * ci + a] = wq * s
                    for i in range(ni):
                        for j in range(nj):
                            s = 0.0
                            for a in range(ci):
                                s = s + Bi[t, q, i, a] * tmp[j * ci + a]
                            out[t, i, j] += s
    finally:
        free(tmp)
    return out_arr


def scatter_csr(const cnp.int64_t[:, ::1] rows, const cnp.int64_t[:, ::1] cols,
                const double[:, :, ::1] local, Py_ssize_t n_rows, Py_ssize_t n_cols):
    """Sum element matrices into CSR arrays; negative indices are skipped.

    Returns (indptr, indices, data) with unsorted column indices per row.
    """
    cdef Py_ssize_t nT = local.shape[0], ni = local.shape[1], nj = local.shape[2]
    cdef Py_ssize_t t, i, j, r, c, k, pos, start
    cnp_count = np.zeros(n_rows + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] count = cnp_count
    with nogil:
        for t in range(nT):
            for i in range(ni):
                r = rows[t, i]
                if r < 0:
                    continue
                for j in range(nj):
                    if cols[t, j] >= 0:
                        count[r + 1] += 1
        for r in range(n_rows):
            count[r + 1] += count[r]
    total = int(cnp_count[n_rows])
    trip_col_arr = np.empty(total, dtype=np.int64)
    trip_val_arr = np.empty(total)
    fill_arr = cnp_count[:n_rows].copy()
    cdef cnp.int64_t[::1] trip_col = trip_col_arr
    cdef double[::1] trip_val = trip_val_arr
    cdef cnp.int64_t[::1] fill = fill_arr
    with nogil:
        for t in range(nT):
            for i in range(ni):
                r = rows[t, i]
                if r < 0:
                    continue
                for j in range(nj):
                    c = cols[t, j]
                    if c < 0:
                        continue
                    pos = fill[r]
                    trip_col[pos] = c
                    trip_val[pos] = local[t, i, j]
                    fill[r] = pos + 1
    marker_arr = -np.ones(n_cols, dtype=np.int64)
    cdef cnp.int64_t[::1] marker = marker_arr
    indptr_arr = np.zeros(n_rows + 1, dtype=np.int64)
    indices_arr = np.empty(total, dtype=np.int64)
    data_arr = np.empty(total)
    cdef cnp.int64_t[::1] indptr = indptr_arr
    cdef cnp.int64_t[::1] indices = indices_arr
    cdef double[::1] data = data_arr
    cdef Py_ssize_t nnz = 0
    with nogil:
        for r in range(n_rows):
            start = nnz
            for k in range(count[r], count[r + 1]):
                c = trip_col[k]
                pos = marker[c]
                if pos < start:
                    marker[c] = nnz
                    indices[nnz] = c
                    data[nnz] = trip_val[k]
                    nnz += 1
                else:
                    data[pos] += trip_val[k]
            indptr[r + 1] = nnz
    return indptr_arr, indices_arr[:nnz].copy(), data_arr[:nnz].copy()
