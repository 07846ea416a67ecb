import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from anygraph.graph_store import GraphDataset, canonical_edges, normalize_adjacency
from anygraph.sparse_linalg import row_layernorm, rng_stream, spmm, truncated_svd
from anygraph.testkit import exact_svd_small


def test_spmm_identity_operand():
    a = sp.csr_matrix([[0.5, 0.5], [0.5, 0.5]])
    np.testing.assert_array_equal(spmm(a, np.eye(2)), [[0.5, 0.5], [0.5, 0.5]])


def test_spmm_zero_row():
    a = sp.csr_matrix([[0.0, 0.0], [1.0, 2.0]])
    out = spmm(a, np.arange(6.0).reshape(2, 3))
    assert np.all(out[0] == 0)


def test_spmm_permutation():
    a = sp.csr_matrix([[0, 1], [1, 0]], dtype=float)
    np.testing.assert_array_equal(spmm(a, np.array([[1.0, 2.0], [3.0, 4.0]])), [[3, 4], [1, 2]])


def test_spmm_dimension_mismatch():
    with pytest.raises(ValueError):
        spmm(sp.csr_matrix(np.eye(2)), np.ones((3, 1)))


def test_spmm_deterministic():
    rng = np.random.default_rng(0)
    a = sp.random(200, 200, density=0.05, random_state=1, format="csr")
    x = rng.standard_normal((200, 16))
    assert spmm(a, x).tobytes() == spmm(a, x).tobytes()


def test_spmm_preserves_constant_vector_on_regular_graph():
    n = 10
    ring = GraphDataset("ring", n, canonical_edges(np.array([[i, (i + 1) % n] for i in range(n)]), n))
    adj = normalize_adjacency(ring, True)
    np.testing.assert_allclose(spmm(adj, np.ones((n, 1))), 1.0, atol=1e-15)


# --- truncated SVD -------------------------------------------------------------

def test_svd_diag_rank_one():
    f = truncated_svd(np.diag([2.0, 1.0]), rank=1)
    np.testing.assert_allclose(f.S, [2.0])
    assert np.linalg.norm(f.reconstruct() - np.diag([2.0, 1.0])) == pytest.approx(1.0)


def test_svd_zero_matrix():
    f = truncated_svd(np.zeros((5, 4)), rank=2)
    np.testing.assert_array_equal(f.S, [0.0, 0.0])
    np.testing.assert_allclose(f.U.T @ f.U, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(f.V.T @ f.V, np.eye(2), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
def test_svd_full_rank_recovery(n, m, seed):
    a = np.random.default_rng(seed).standard_normal((n, m))
    f = truncated_svd(a, rank=min(n, m), seed=seed)
    assert np.linalg.norm(f.reconstruct() - a) <= 1e-6 * np.linalg.norm(a)
    assert np.all(np.diff(f.S) <= 1e-12) and np.all(f.S >= 0)
    np.testing.assert_allclose(f.U.T @ f.U, np.eye(f.rank), atol=1e-8)
    np.testing.assert_allclose(f.V.T @ f.V, np.eye(f.rank), atol=1e-8)


def test_svd_sparse_input_matches_dense():
    a = sp.random(40, 30, density=0.2, random_state=3, format="csr")
    fs = truncated_svd(a, 5, seed=11)
    fd = truncated_svd(a.toarray(), 5, seed=11)
    np.testing.assert_allclose(fs.S, fd.S, rtol=1e-12)


def test_svd_sign_convention_and_determinism():
    a = np.random.default_rng(4).standard_normal((20, 15))
    f1 = truncated_svd(a, 4, seed=9)
    f2 = truncated_svd(a, 4, seed=9)
    assert f1.U.tobytes() == f2.U.tobytes()
    pivots = f1.U[np.argmax(np.abs(f1.U), axis=0), np.arange(4)]
    assert np.all(pivots >= 0)


def test_svd_errors():
    with pytest.raises(ValueError):
        truncated_svd(np.eye(3), 0)
    bad = np.eye(3)
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        truncated_svd(bad, 1)


def _gapped(seed, n=50, m=40, gap=0.1):
    rng = np.random.default_rng(seed)
    q1, _ = np.linalg.qr(rng.standard_normal((n, m)))
    q2, _ = np.linalg.qr(rng.standard_normal((m, m)))
    s = 10.0 * (1.0 - gap) ** np.arange(m)
    return (q1 * s) @ q2.T


@pytest.mark.parametrize("seed", range(5))
def test_svd_vs_jacobi_oracle(seed):
    a = _gapped(seed)
    rank = 8
    oracle = exact_svd_small(a)
    f = truncated_svd(a, rank, power_iters=2, seed=seed)
    np.testing.assert_allclose(f.S, oracle.S[:rank], rtol=1e-3)
    # columns agree up to sign
    dots = np.abs(np.sum(f.U * oracle.U[:, :rank], axis=0))
    np.testing.assert_allclose(dots, 1.0, atol=1e-2)


@pytest.mark.parametrize("seed", range(20))
def test_svd_near_optimal_frobenius_error(seed):
    a = np.random.default_rng(100 + seed).standard_normal((50, 40))
    rank = 10
    oracle = exact_svd_small(a)
    optimal = np.sqrt(np.sum(oracle.S[rank:] ** 2))
    err = np.linalg.norm(truncated_svd(a, rank, seed=seed).reconstruct() - a)
    assert err <= 1.5 * optimal


# --- layernorm ------------------------------------------------------------------

def test_layernorm_examples():
    np.testing.assert_allclose(row_layernorm(np.array([[1.0, -1.0]]), eps=0.0), [[1.0, -1.0]])
    np.testing.assert_array_equal(row_layernorm(np.array([[5.0, 5.0, 5.0]])), [[0.0, 0.0, 0.0]])
    np.testing.assert_allclose(row_layernorm(np.array([[0.0, 2.0]]), eps=0.0), [[-1.0, 1.0]])
    np.testing.assert_array_equal(row_layernorm(np.array([[3.0, 3.0]]), eps=0.0), [[0.0, 0.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**31))
def test_layernorm_moments(cols, seed):
    x = np.random.default_rng(seed).standard_normal((5, cols)) * 7 + 3
    y = row_layernorm(x, eps=1e-12)
    assert np.all(np.abs(y.mean(axis=1)) <= 1e-9)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-6)


# --- rng streams ----------------------------------------------------------------

def test_rng_stream_reproducible():
    assert np.array_equal(rng_stream(3, "a").random(16), rng_stream(3, "a").random(16))


def test_rng_stream_tags_differ():
    a = rng_stream(3, "dataset:x:svd:0").random(16)
    b = rng_stream(3, "dataset:y:svd:0").random(16)
    c = rng_stream(4, "dataset:x:svd:0").random(16)
    assert not np.any(a == b) and not np.any(a == c)


def test_rng_stream_tags_look_independent():
    draws = np.array([rng_stream(0, f"tag{i}").random() for i in range(2000)])
    # uniform mean 0.5 with sd 1/sqrt(12*2000) ~ 0.0065
    assert abs(draws.mean() - 0.5) < 5 * 0.0065
