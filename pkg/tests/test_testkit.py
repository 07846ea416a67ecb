import math

import numpy as np
import pytest

from anygraph.testkit import (
    brute_force_softmax_loss,
    compare,
    exact_svd_small,
    finite_diff_grad,
    max_relative_error,
    mp_softmax_loss,
)


def test_jacobi_diag():
    f = exact_svd_small(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(f.S, [3, 2, 1], atol=1e-15)


def test_jacobi_rank_one():
    rng = np.random.default_rng(0)
    u, v = rng.standard_normal(6), rng.standard_normal(4)
    f = exact_svd_small(np.outer(u, v))
    assert f.S[0] == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v), rel=1e-14)
    np.testing.assert_allclose(f.S[1:], 0.0, atol=1e-12)


@pytest.mark.parametrize("shape", [(10, 7), (7, 10)])
def test_jacobi_orthogonality_and_reconstruction(shape):
    m = np.random.default_rng(1).standard_normal(shape)
    f = exact_svd_small(m)
    r = min(shape)
    np.testing.assert_allclose(f.U.T @ f.U, np.eye(r), atol=1e-12)
    np.testing.assert_allclose(f.V.T @ f.V, np.eye(r), atol=1e-12)
    np.testing.assert_allclose((f.U * f.S) @ f.V.T, m, atol=1e-12)


def test_jacobi_cap():
    with pytest.raises(ValueError):
        exact_svd_small(np.zeros((65, 3)))


def test_fd_quadratic():
    x = np.array([3.0])
    g = finite_diff_grad(lambda: float(x[0] ** 2), x, h=1e-5)
    assert abs(g[0] - 6.0) < 1e-9
    assert x[0] == 3.0


def test_fd_zero_function():
    p = {"a": np.ones((2, 3)), "b": np.zeros(4)}
    g = finite_diff_grad(lambda: 0.0, p)
    assert all(np.all(v == 0) for v in g.values())


def test_softmax_oracles():
    assert brute_force_softmax_loss([0.0, 0.0, 0.0, 0.0]) == pytest.approx(math.log(4), abs=1e-15)
    assert brute_force_softmax_loss([1.0, 0.0, 0.0]) == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-15)
    assert round(mp_softmax_loss([1.0, 0.0, 0.0]), 6) == 0.551445
    assert mp_softmax_loss([1e4, 0.0], 1) == pytest.approx(1e4)
    with pytest.raises(OverflowError):
        brute_force_softmax_loss([31.0, 0.0])


def test_relative_error_and_compare():
    assert max_relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert max_relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
    assert compare([1.0, 2.0], [1.0, 2.0 + 1e-9], rtol=1e-8).passed
    assert not compare([1.0], [2.0], rtol=1e-3).passed
