# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ROUGE kernels over integer token sequences."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef cnp.int64_t i64


def lcs_length(const i64[::1] a, const i64[::1] b):
    """Length of the longest common subsequence, O(len(a) * len(b)) time, O(len(b)) memory."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef i64 diag, up, best
    if n == 0 or m == 0:
        return 0
    cdef i64* row = <i64*> malloc((m + 1) * sizeof(i64))
    if row == NULL:
        raise MemoryError()
    try:
        for j in range(m + 1):
            row[j] = 0
        for i in range(n):
            diag = 0
            for j in range(1, m + 1):
                up = row[j]
                if a[i] == b[j - 1]:
                    best = diag + 1
                else:
                    best = up if up > row[j - 1] else row[j - 1]
                diag = up
                row[j] = best
        return row[m]
    finally:
        free(row)


cdef cnp.ndarray _keys(const i64[::1] seq, int n):
    cdef Py_ssize_t count = seq.shape[0] - n + 1, i
    if count <= 0:
        return np.empty(0, dtype=np.int64)
    cdef cnp.ndarray[i64, ndim=1] out = np.empty(count, dtype=np.int64)
    for i in range(count):
        if n == 1:
            out[i] = seq[i]
        else:
            out[i] = (seq[i] << 32) | seq[i + 1]
    out.sort()
    return out


def ngram_overlap(const i64[::1] a, const i64[::1] b, int n):
    """(clipped overlap, n-gram count of a, n-gram count of b) for n in {1, 2}; ids must be < 2**31."""
    if n not in (1, 2):
        raise ValueError("compiled kernel supports n in {1, 2}")
    cdef cnp.ndarray[i64, ndim=1] ka = _keys(a, n)
    cdef cnp.ndarray[i64, ndim=1] kb = _keys(b, n)
    cdef Py_ssize_t i = 0, j = 0, na = ka.shape[0], nb = kb.shape[0]
    cdef i64 overlap = 0
    while i < na and j < nb:
        if ka[i] == kb[j]:
            overlap += 1
            i += 1
            j += 1
        elif ka[i] < kb[j]:
            i += 1
        else:
            j += 1
    return overlap, na, nb
