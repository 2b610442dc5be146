import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from endogov.kg import _pykernels, kernels

pytestmark = pytest.mark.skipif(not kernels.compiled_available(), reason="compiled extension not built")


def _c():
    from endogov.kg import _ckernels

    return _ckernels


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=64)


@st.composite
def embeddings(draw):
    n = draw(st.integers(2, 25))
    d = draw(st.integers(1, 9))
    emb = draw(arrays(np.float64, (n, d), elements=finite))
    emb[:, 0] += np.where((emb * emb).sum(axis=1) < 1e-100, 1.0, 0.0)  # no zero-norm rows
    return np.ascontiguousarray(emb)


@settings(max_examples=80, deadline=None)
@given(embeddings(), st.integers(0, 2**32 - 1), st.floats(-1, 1))
def test_link_edges_bit_identical(emb, seed, thr):
    rng = np.random.default_rng(seed)
    n = emb.shape[0]
    alpha = 1.0 / rng.integers(1, 6, n).astype(np.float64)
    doc = rng.integers(0, 3, n).astype(np.int64)
    a = _pykernels.link_edges(emb, alpha, doc, thr)
    b = _c().link_edges(emb, alpha, doc, thr)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


@settings(max_examples=80, deadline=None)
@given(embeddings(), st.floats(-1, 1))
def test_cosine_pairs_bit_identical(emb, thr):
    a = _pykernels.cosine_pairs_above(emb, thr)
    b = _c().cosine_pairs_above(emb, thr)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert np.array_equal(_pykernels.row_norms(emb), _c().row_norms(emb))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_two_hop_bit_identical(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 3 * n + 1)
    src = rng.integers(0, n, m)
    dst = rng.integers(0, n, m)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    w = rng.uniform(0.0, 1.0, src.size)
    s = np.concatenate([src, dst])
    d = np.concatenate([dst, src])
    ww = np.concatenate([w, w])
    order = np.lexsort((d, s))
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, s[order] + 1, 1)
    indptr = np.cumsum(indptr)
    seeds = (rng.random(n) < 0.3).astype(np.uint8)
    a = _pykernels.two_hop_relevance(indptr, d[order].astype(np.int64), ww[order], seeds)
    b = _c().two_hop_relevance(indptr, d[order].astype(np.int64), ww[order], seeds)
    assert np.array_equal(a, b)
    assert np.all(a[seeds.astype(bool)] == 1.0)


def test_empty_inputs():
    emb = np.ones((1, 3))
    for mod in (_pykernels, _c()):
        src, dst, w = mod.link_edges(emb, np.ones(1), np.zeros(1, dtype=np.int64), 0.1)
        assert src.size == dst.size == w.size == 0
