"""Compiled inner loops; see ``_fallback`` for the reference semantics."""
import numpy as np

from libc.math cimport sqrt
from scipy.linalg.cython_blas cimport daxpy, dcopy, dnrm2
from scipy.linalg.cython_lapack cimport dpotrs


def sequential_code_sweep(double[::1, :] chol, double[::1, :] rhs,
                          double[::1, :] codes, double coupling):
    cdef int K = codes.shape[0]
    cdef int n = codes.shape[1]
    cdef int one = 1
    cdef int info = 0
    cdef char uplo = b'L'
    cdef Py_ssize_t i, k
    cdef double[::1] total = np.zeros(K)
    cdef double[::1] work = np.empty(K)
    cdef double w
    if chol.shape[0] != K or chol.shape[1] != K or rhs.shape[0] != K or rhs.shape[1] != n:
        raise ValueError("shape mismatch")
    for i in range(n):
        for k in range(K):
            total[k] += codes[k, i]
    for i in range(n):
        for k in range(K):
            work[k] = rhs[k, i] + coupling * (total[k] - codes[k, i])
        dpotrs(&uplo, &K, &one, &chol[0, 0], &K, &work[0], &K, &info)
        if info != 0:
            raise ValueError(f"dpotrs failed with info={info}")
        for k in range(K):
            w = work[k]
            total[k] += w - codes[k, i]
            codes[k, i] = w


def atom_block_sweep(double[::1, :] atoms, double[::1, :] cross, double[::1, :] gram,
                     bint normalize, double dead_tol):
    cdef int M = atoms.shape[0]
    cdef int k = atoms.shape[1]
    cdef int inc = 1
    cdef Py_ssize_t a, b, r
    cdef double alpha, nrm, scale
    cdef double[::1] v = np.empty(M)
    dead_arr = np.zeros(k, dtype=np.uint8)
    cdef unsigned char[::1] dead = dead_arr
    if cross.shape[0] != M or cross.shape[1] != k or gram.shape[0] != k or gram.shape[1] != k:
        raise ValueError("shape mismatch")
    if k == 0:
        return dead_arr
    for a in range(k):
        dcopy(&M, &cross[0, a], &inc, &v[0], &inc)
        for b in range(k):
            if b != a and gram[b, a] != 0.0:
                alpha = -gram[b, a]
                daxpy(&M, &alpha, &atoms[0, b], &inc, &v[0], &inc)
        nrm = dnrm2(&M, &v[0], &inc)
        if gram[a, a] <= 0.0 or nrm < dead_tol:
            dead[a] = 1
            for b in range(k):
                gram[a, b] = 0.0
                gram[b, a] = 0.0
            for r in range(M):
                cross[r, a] = 0.0
            continue
        scale = 1.0 / nrm if normalize else 1.0 / gram[a, a]
        for r in range(M):
            atoms[r, a] = v[r] * scale
    return dead_arr
