"""Reference oracles for verification.

These deliberately avoid the engine's kernels (and LAPACK): a Jacobi SVD
built from dot products and plane rotations, central finite differences,
and softmax losses evaluated without the max-subtraction trick.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import mpmath
import numpy as np

from .sparse_linalg import SvdFactors

__all__ = [
    "OracleResult",
    "exact_svd_small",
    "finite_diff_grad",
    "brute_force_softmax_loss",
    "mp_softmax_loss",
    "max_relative_error",
    "compare",
    "mean_and_sem",
    "cosine_similarity",
]

EXACT_SVD_MAX_DIM = 64


@dataclass
class OracleResult:
    value: Any
    tolerance: float
    passed: bool
    detail: dict = field(default_factory=dict)


def compare(actual, expected, rtol: float, atol: float = 0.0) -> OracleResult:
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    err = np.abs(a - e)
    ok = bool(np.all(err <= atol + rtol * np.abs(e)))
    return OracleResult(a, rtol, ok, {"max_abs_err": float(err.max(initial=0.0))})


def exact_svd_small(m: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> SvdFactors:
    """One-sided (Hestenes) Jacobi SVD, thin form, for matrices up to 64x64."""
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if max(a.shape) > EXACT_SVD_MAX_DIM:
        raise ValueError(f"exact_svd_small is capped at {EXACT_SVD_MAX_DIM}x{EXACT_SVD_MAX_DIM}")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T.copy()
    rows, cols = a.shape
    w = a.copy()
    v = np.eye(cols)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                alpha = float(np.dot(w[:, p], w[:, p]))
                beta = float(np.dot(w[:, q], w[:, q]))
                gamma = float(np.dot(w[:, p], w[:, q]))
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                wp, wq = w[:, p].copy(), w[:, q].copy()
                w[:, p], w[:, q] = c * wp - s * wq, s * wp + c * wq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break

    sig = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = sorted(range(cols), key=lambda j: -sig[j])
    sig = sig[order]
    w = w[:, order]
    v = v[:, order]
    u = np.zeros((rows, cols))
    scale = sig[0] if cols and sig[0] > 0 else 1.0
    for j in range(cols):
        if sig[j] > 1e-14 * scale:
            u[:, j] = w[:, j] / sig[j]
        else:
            sig[j] = 0.0
            # complete the basis with Gram-Schmidt over the standard vectors
            for e in range(rows):
                cand = np.zeros(rows)
                cand[e] = 1.0
                for _ in range(2):
                    for i in range(j):
                        cand -= np.dot(u[:, i], cand) * u[:, i]
                norm = math.sqrt(float(np.dot(cand, cand)))
                if norm > 1e-8:
                    u[:, j] = cand / norm
                    break
    if transposed:
        return SvdFactors(U=v, S=sig, V=u)
    return SvdFactors(U=u, S=sig, V=v)


def finite_diff_grad(f: Callable[[], float], params, h: float = 1e-5):
    """Central differences of ``f()`` w.r.t. arrays that ``f`` reads.

    ``params`` is an array or a dict of arrays; they are perturbed in place
    and restored. Returns the same structure.
    """
    if isinstance(params, dict):
        return {name: finite_diff_grad(f, arr, h) for name, arr in params.items()}
    arr = params
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def brute_force_softmax_loss(scores, positive: int = 0) -> float:
    """``-log(exp(s_p) / sum exp(s_n))`` directly, with compensated summation.

    Valid for ``|scores| <= 30``.
    """
    s = [float(x) for x in np.asarray(scores).ravel()]
    if max(abs(x) for x in s) > 30.0:
        raise OverflowError("brute_force_softmax_loss is limited to |scores| <= 30")
    total = math.fsum(math.exp(x) for x in s)
    return math.log(total) - s[positive]


def mp_softmax_loss(scores, positive: int = 0, dps: int = 60) -> float:
    """Same loss in arbitrary precision; any score magnitude."""
    with mpmath.workdps(dps):
        s = [mpmath.mpf(float(x)) for x in np.asarray(scores).ravel()]
        total = mpmath.fsum(mpmath.exp(x) for x in s)
        return float(mpmath.log(total) - s[positive])


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)`` over one tensor (0 when both vanish)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def mean_and_sem(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / math.sqrt(float(a @ a) * float(b @ b)))
