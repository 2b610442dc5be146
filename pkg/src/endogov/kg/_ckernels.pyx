# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops for graph construction and retrieval.

Arithmetic order matches ``_pykernels`` and ``graph.link_score`` term for
term (sequential dot products, norms taken separately) so both backends
produce bit-identical weights when built without FMA contraction.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline double _dot(const double[:, ::1] x, Py_ssize_t i, Py_ssize_t j, Py_ssize_t d) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t k
    for k in range(d):
        s += x[i, k] * x[j, k]
    return s


def row_norms(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = sqrt(_dot(x, i, i, d))
    return out


def link_edges(const double[:, ::1] emb, const double[::1] alpha, const long long[::1] doc, double threshold):
    """All pairs i < j in different documents with weighted link score > threshold."""
    cdef Py_ssize_t n = emb.shape[0], d = emb.shape[1], i, j
    cdef double[::1] norms = row_norms(emb)
    cdef double cos, w
    src, dst, wts = [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            if doc[i] == doc[j]:
                continue
            cos = _dot(emb, i, j, d) / (norms[i] * norms[j])
            w = cos * (0.5 * (alpha[i] + alpha[j]))
            if w > threshold:
                src.append(i)
                dst.append(j)
                wts.append(w)
    return (np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64),
            np.asarray(wts, dtype=np.float64))


def cosine_pairs_above(const double[:, ::1] emb, double threshold):
    """All pairs i < j whose cosine similarity exceeds threshold."""
    cdef Py_ssize_t n = emb.shape[0], d = emb.shape[1], i, j
    cdef double[::1] norms = row_norms(emb)
    cdef double cos
    src, dst = [], []
    for i in range(n):
        for j in range(i + 1, n):
            cos = _dot(emb, i, j, d) / (norms[i] * norms[j])
            if cos > threshold:
                src.append(i)
                dst.append(j)
    return np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)


def two_hop_relevance(const long long[::1] indptr, const long long[::1] indices,
                      const double[::1] weights, const unsigned char[::1] seeds):
    """Best product of edge weights over paths of at most two hops from any seed.

    Seeds score 1.0; unreachable nodes score 0.0.
    """
    cdef Py_ssize_t n = indptr.shape[0] - 1, s, a, b, u, v
    cdef double w1, w
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] rel = out
    with nogil:
        for s in range(n):
            if not seeds[s]:
                continue
            rel[s] = 1.0
        for s in range(n):
            if not seeds[s]:
                continue
            for a in range(indptr[s], indptr[s + 1]):
                u = indices[a]
                w1 = weights[a]
                if w1 > rel[u]:
                    rel[u] = w1
                for b in range(indptr[u], indptr[u + 1]):
                    v = indices[b]
                    w = w1 * weights[b]
                    if w > rel[v]:
                        rel[v] = w
    return out
