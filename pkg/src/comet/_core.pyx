# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: ragged softmax pooling and the Gaussian class posterior."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


def pal_pool_flat(double[:, ::1] flat, long long[::1] offsets, double[::1] theta):
    """Softmax(X_i theta)-weighted token average per sample.

    flat stacks all token matrices row-wise; offsets has n+1 entries.
    """
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t d = flat.shape[1]
    out_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, j, start, stop
    cdef double score, mx, z, w
    cdef double[::1] scores
    scores_arr = np.empty(flat.shape[0], dtype=np.float64)
    scores = scores_arr
    for i in range(n):
        start = offsets[i]
        stop = offsets[i + 1]
        mx = -1e308
        for p in range(start, stop):
            score = 0.0
            for j in range(d):
                score += flat[p, j] * theta[j]
            scores[p] = score
            if score > mx:
                mx = score
        z = 0.0
        for p in range(start, stop):
            scores[p] = exp(scores[p] - mx)
            z += scores[p]
        for p in range(start, stop):
            w = scores[p] / z
            for j in range(d):
                out[i, j] += w * flat[p, j]
    return out_arr


def kernel_posterior(double[:, ::1] qry, double[:, ::1] sup,
                     long long[::1] labels, Py_ssize_t n_classes,
                     double h, double alpha):
    """Unnormalized-then-normalized Gaussian kernel class posterior.

    p[q, c] proportional to alpha + sum over support of class c of
    exp(-||x_q - x_i||^2 / (2 h^2)).
    """
    cdef Py_ssize_t m = qry.shape[0]
    cdef Py_ssize_t n = sup.shape[0]
    cdef Py_ssize_t d = qry.shape[1]
    cdef Py_ssize_t chunk = 1024
    out_arr = np.full((m, n_classes), alpha, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] sup_sq = np.einsum("ij,ij->i", sup, sup)
    cdef double[::1] qry_sq = np.einsum("ij,ij->i", qry, qry)
    cross_arr = np.empty((chunk, n), dtype=np.float64)
    cdef double[:, ::1] cross = cross_arr
    cdef Py_ssize_t start, rows, q, i, j
    cdef double dist, inv, total, one = 1.0, zero = 0.0
    cdef int bm, bn, bk, lda
    inv = 1.0 / (2.0 * h * h)
    for start in range(0, m, chunk):
        rows = min(chunk, m - start)
        # cross[:rows] = qry[start:start+rows] @ sup.T, via column-major BLAS:
        # C^T (n x rows) = sup_cm^T (n x d) @ qry_cm (d x rows)
        bm = <int> n
        bn = <int> rows
        bk = <int> d
        lda = <int> d
        dgemm("T", "N", &bm, &bn, &bk, &one,
              &sup[0, 0], &lda, &qry[start, 0], &lda, &zero, &cross[0, 0], &bm)
        for q in range(rows):
            for i in range(n):
                dist = qry_sq[start + q] + sup_sq[i] - 2.0 * cross[q, i]
                if dist < 0.0:
                    dist = 0.0
                out[start + q, labels[i]] += exp(-dist * inv)
            total = 0.0
            for j in range(n_classes):
                total += out[start + q, j]
            for j in range(n_classes):
                out[start + q, j] /= total
    return out_arr
