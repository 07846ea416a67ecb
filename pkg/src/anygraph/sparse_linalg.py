"""Numerical kernels: sparse-dense products, randomized truncated SVD,
non-trainable row normalization and tagged RNG streams.

Dense matrices are plain float64 ``numpy`` arrays; sparse operands are
``scipy.sparse`` CSR matrices (or anything exposing one as ``.matrix``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SvdFactors",
    "spmm",
    "truncated_svd",
    "row_layernorm",
    "rng_stream",
    "as_generator",
]

LAYERNORM_EPS = 1e-6


@dataclass(frozen=True)
class SvdFactors:
    """Rank-r factors with ``m ~= U @ diag(S) @ V.T``."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.S.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def rng_stream(seed: int, stream_tag: str) -> np.random.Generator:
    """Reproducible generator keyed by ``(seed, stream_tag)``.

    The tag is hashed into the seed entropy, so streams with different tags
    are statistically independent while the same pair always replays the
    same sequence.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    words = np.frombuffer(hashlib.sha256(stream_tag.encode("utf-8")).digest(), dtype="<u4")
    ss = np.random.SeedSequence([int(seed), *(int(w) for w in words)])
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(seed: int | np.random.Generator, tag: str = "default") -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return rng_stream(int(seed), tag)


def _csr(a) -> sp.csr_matrix:
    mat = getattr(a, "matrix", a)
    if not sp.issparse(mat):
        raise TypeError(f"expected a sparse matrix, got {type(mat).__name__}")
    return mat.tocsr()


def spmm(a, x: np.ndarray) -> np.ndarray:
    """Sparse (CSR) times dense.

    Rows are reduced in stored order with ascending column indices, so the
    result is bit-reproducible for identical inputs.
    """
    mat = _csr(a)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or mat.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {mat.shape} @ {x.shape}")
    if not mat.has_sorted_indices:
        mat = mat.sorted_indices()
    return np.asarray(mat @ x, dtype=np.float64)


def _orthonormal(y: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(y, mode="reduced")
    return q


def truncated_svd(
    m,
    rank: int,
    power_iters: int = 2,
    oversample: int = 8,
    seed: int | np.random.Generator = 0,
) -> SvdFactors:
    """Randomized truncated SVD (Gaussian range finder + subspace iteration).

    ``rank + oversample`` test vectors are drawn (clipped to the smaller
    matrix dimension); each power pass re-orthonormalizes both sides. Columns
    of ``U`` are sign-fixed so their largest-magnitude entry is non-negative.
    """
    if rank <= 0:
        raise ValueError(f"rank must be positive, got {rank}")
    if sp.issparse(m):
        mat = m.tocsr().astype(np.float64)
        finite = np.all(np.isfinite(mat.data))
    else:
        mat = np.asarray(m, dtype=np.float64)
        if mat.ndim != 2:
            raise ValueError("truncated_svd expects a 2-D matrix")
        finite = np.all(np.isfinite(mat))
    if not finite:
        raise ValueError("matrix contains non-finite entries")
    n_rows, n_cols = mat.shape
    if rank > min(n_rows, n_cols):
        raise ValueError(f"rank {rank} exceeds min dimension of {mat.shape}")

    rng = as_generator(seed, "svd")
    width = min(rank + max(oversample, 0), n_rows, n_cols)
    omega = rng.standard_normal((n_cols, width))
    q = _orthonormal(mat @ omega)
    for _ in range(power_iters):
        z = _orthonormal(np.asarray(mat.T @ q))
        q = _orthonormal(np.asarray(mat @ z))

    # small projected problem: B = Q^T M, shape (width, n_cols)
    b = np.asarray(mat.T @ q).T
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u = q @ ub[:, :rank]
    s = s[:rank].copy()
    v = vt[:rank].T.copy()

    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(rank)] < 0, -1.0, 1.0)
    return SvdFactors(U=u * signs, S=s, V=v * signs)


def row_layernorm(x: np.ndarray, eps: float = LAYERNORM_EPS) -> np.ndarray:
    """Per-row ``(x - mean) / sqrt(var + eps)`` with population variance.

    No learned scale or shift. Constant rows come out as zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    denom = np.sqrt(var + eps)
    out = np.zeros_like(centered)
    np.divide(centered, denom, out=out, where=denom > 0)
    return out
