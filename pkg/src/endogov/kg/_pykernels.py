"""Pure-Python/numpy fallback for the compiled graph kernels.

Same signatures and semantics as ``_ckernels``. Dot products are
accumulated one dimension at a time across the whole pair matrix, which
keeps the scalar evaluation order, so weights are bit-identical to the
compiled path and to ``graph.link_score``.
"""

import numpy as np


def row_norms(x):
    x = np.asarray(x, dtype=np.float64)
    sq = np.zeros(x.shape[0], dtype=np.float64)
    for k in range(x.shape[1]):
        sq += x[:, k] * x[:, k]
    return np.sqrt(sq)


def _cosine_matrix(emb):
    emb = np.asarray(emb, dtype=np.float64)
    n = emb.shape[0]
    dot = np.zeros((n, n), dtype=np.float64)
    for k in range(emb.shape[1]):
        col = emb[:, k]
        dot += col[:, None] * col[None, :]
    norms = row_norms(emb)
    return dot / (norms[:, None] * norms[None, :])


def link_edges(emb, alpha, doc, threshold):
    emb = np.asarray(emb, dtype=np.float64)
    n = emb.shape[0]
    if n < 2:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), np.empty(0, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    doc = np.asarray(doc)
    w = _cosine_matrix(emb) * (0.5 * (alpha[:, None] + alpha[None, :]))
    iu, ju = np.triu_indices(n, k=1)
    keep = (doc[iu] != doc[ju]) & (w[iu, ju] > threshold)
    return iu[keep].astype(np.int64), ju[keep].astype(np.int64), w[iu[keep], ju[keep]]


def cosine_pairs_above(emb, threshold):
    emb = np.asarray(emb, dtype=np.float64)
    n = emb.shape[0]
    if n < 2:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy()
    cos = _cosine_matrix(emb)
    iu, ju = np.triu_indices(n, k=1)
    keep = cos[iu, ju] > threshold
    return iu[keep].astype(np.int64), ju[keep].astype(np.int64)


def two_hop_relevance(indptr, indices, weights, seeds):
    n = len(indptr) - 1
    rel = [0.0] * n
    seed_ids = [s for s in range(n) if seeds[s]]
    for s in seed_ids:
        rel[s] = 1.0
    for s in seed_ids:
        for a in range(indptr[s], indptr[s + 1]):
            u = int(indices[a])
            w1 = float(weights[a])
            if w1 > rel[u]:
                rel[u] = w1
            for b in range(indptr[u], indptr[u + 1]):
                v = int(indices[b])
                w = w1 * float(weights[b])
                if w > rel[v]:
                    rel[v] = w
    return np.asarray(rel, dtype=np.float64)
