import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from keibs.errors import InvalidArgumentError, SingularityError
from keibs.fastinv import (
    DiagonalNoise,
    SparsePrecision,
    SparseVector,
    cond_var_diag,
    inv_classical_sg,
    inv_full_grid,
    inv_grid_1d,
    inv_tsg,
    kinv_times_kvec_1d,
    kinv_times_kvec_full_grid,
    kinv_times_kvec_sg,
    regularized_solve,
)
from keibs.grid import TruncatedSparseGrid, classical_sg, points_array, sg_increment
from keibs.kernel import bf_kernel, kernel_matrix, laplace_kernel

from oracles import dense_inv, random_kernel, random_tsg, rel_err

BF1 = bf_kernel(1)
XS3 = [0.25, 0.5, 0.75]


def test_1d_three_point_example():
    P = inv_grid_1d(BF1.factors[0], XS3).toarray()
    np.testing.assert_allclose(P, [[4.8, -4, 0], [-4, 8, -4], [0, -4, 4]], atol=1e-12)
    K = kernel_matrix(BF1, np.array(XS3)[:, None])
    np.testing.assert_allclose(P @ K, np.eye(3), atol=1e-10)


def test_1d_single_point():
    P = inv_grid_1d(BF1.factors[0], [0.3])
    assert P.toarray()[0, 0] == pytest.approx(1 / 1.3, rel=1e-15)


@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=40, unique=True), st.sampled_from(["bf", "laplace"]))
def test_1d_tridiagonal_and_exact(xs, kind):
    xs = np.sort(np.array(xs))
    if xs.size > 1 and np.min(np.diff(xs)) < 1e-3:
        return
    k = bf_kernel(1) if kind == "bf" else laplace_kernel(1.3, 1)
    P = inv_grid_1d(k.factors[0], xs)
    n = xs.size
    assert P.nnz == 3 * n - 2
    rows, cols = P.matrix.nonzero()
    assert np.all(np.abs(rows - cols) <= 1)
    assert rel_err(P.toarray(), dense_inv(k, xs[:, None])) <= 1e-8


def test_symmetric_entries():
    P = inv_classical_sg(bf_kernel(2), 2, 3)
    for (i, j), v in P.entries().items():
        assert P[j, i] == v


def test_1d_rejects_repeated_points():
    with pytest.raises(SingularityError):
        inv_grid_1d(BF1.factors[0], [0.25, 0.25, 0.5])
    with pytest.raises(SingularityError):
        inv_grid_1d(BF1.factors[0], [0.5, 0.25])


def test_kinv_kvec_1d_examples():
    f = BF1.factors[0]
    v = kinv_times_kvec_1d(f, XS3, 0.5)
    np.testing.assert_allclose(v.toarray(), [0, 1, 0], atol=1e-14)
    v = kinv_times_kvec_1d(f, XS3, 3 / 8)
    assert sorted(v.indices.tolist()) == [0, 1]
    K = kernel_matrix(BF1, np.array(XS3)[:, None])
    np.testing.assert_allclose(K @ v.toarray(), BF1.matrix(np.array([[3 / 8]]), np.array(XS3)[:, None])[0], atol=1e-12)
    v = kinv_times_kvec_1d(f, XS3, 0.1)
    assert v.indices.tolist() == [0]
    np.testing.assert_allclose(v.toarray(), np.linalg.solve(K, BF1.matrix(np.array([[0.1]]), np.array(XS3)[:, None])[0]), atol=1e-12)


@given(st.floats(0.001, 0.999))
def test_kinv_kvec_1d_matches_dense(x):
    k = laplace_kernel(0.8, 1)
    xs = np.array([0.1, 0.3, 0.35, 0.6, 0.9])
    v = kinv_times_kvec_1d(k.factors[0], xs, x)
    assert len(v.indices) <= 2
    dense = np.linalg.solve(kernel_matrix(k, xs[:, None]), k.matrix(np.array([[x]]), xs[:, None])[0])
    np.testing.assert_allclose(v.toarray(), dense, atol=1e-10)


def test_full_grid_kron_example():
    k = bf_kernel(2)
    P = inv_full_grid(k, [[0.5], XS3]).toarray()
    K2inv = inv_grid_1d(BF1.factors[0], XS3).toarray()
    np.testing.assert_allclose(P, K2inv / 1.5, atol=1e-12)


def test_full_grid_d1_equals_1d():
    P = inv_full_grid(BF1, [XS3]).toarray()
    np.testing.assert_array_equal(P, inv_grid_1d(BF1.factors[0], XS3).toarray())


def test_full_grid_random_d3(rng):
    for _ in range(5):
        k = random_kernel(rng, 3)
        axes = [np.sort(rng.uniform(0.02, 0.98, size=rng.integers(1, 4))) for _ in range(3)]
        X = np.array(np.meshgrid(*axes, indexing="ij")).reshape(3, -1).T
        assert rel_err(inv_full_grid(k, axes).toarray(), dense_inv(k, X)) <= 1e-8
        x = rng.uniform(size=3)
        v = kinv_times_kvec_full_grid(k, axes, x).toarray()
        np.testing.assert_allclose(v, np.linalg.solve(kernel_matrix(k, X), k.matrix(x[None], X)[0]), atol=1e-9)


def test_classical_sg_examples():
    P = inv_classical_sg(BF1, 1, 3).toarray()
    xs = points_array(classical_sg(1, 3))[:, 0]
    order = np.argsort(xs)
    np.testing.assert_allclose(P[np.ix_(order, order)], inv_grid_1d(BF1.factors[0], xs[order]).toarray(), atol=1e-12)
    for d, tau in [(2, 2), (3, 3)]:
        k = bf_kernel(d)
        X = points_array(classical_sg(d, tau))
        assert rel_err(inv_classical_sg(k, d, tau).toarray(), dense_inv(k, X)) <= 1e-8


def test_kinv_kvec_sg_examples():
    k = bf_kernel(2)
    pts = classical_sg(2, 2)
    v = kinv_times_kvec_sg(k, 2, 2, pts[3])
    np.testing.assert_allclose(v.toarray(), np.eye(5)[3], atol=1e-12)
    X = points_array(pts)
    x = np.array([0.3, 0.6])
    dense = np.linalg.solve(kernel_matrix(k, X), k.matrix(x[None], X)[0])
    np.testing.assert_allclose(kinv_times_kvec_sg(k, 2, 2, x).toarray(), dense, atol=1e-8)
    # homogeneity: scaling the kernel does not change K^{-1} k(x)
    np.testing.assert_allclose(kinv_times_kvec_sg(k.scaled(7.0), 2, 2, x).toarray(), dense, atol=1e-8)


def test_tsg_examples(rng):
    k = bf_kernel(2)
    empty = TruncatedSparseGrid.from_level(2, 3)
    np.testing.assert_array_equal(inv_tsg(k, empty).toarray(), inv_classical_sg(k, 2, 3).toarray())
    inc = sg_increment(2, 1)
    t = TruncatedSparseGrid.from_level(2, 1, [inc[1], inc[3]])
    assert rel_err(inv_tsg(k, t).toarray(), dense_inv(k, t.coords())) <= 1e-8


def test_cond_var_is_schur_complement(rng):
    for d, tau in [(1, 3), (2, 2), (3, 2)]:
        k = random_kernel(rng, d)
        A = points_array(classical_sg(d, tau))
        Kinv = np.linalg.inv(kernel_matrix(k, A))
        inc = sg_increment(d, tau)
        X = points_array(inc)
        kx = k.matrix(X, A)
        schur = k.diag(X) - np.einsum("ij,jk,ik->i", kx, Kinv, kx)
        np.testing.assert_allclose(cond_var_diag(k, inc), 1 / schur, rtol=1e-8)


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_scaling_covariance(c):
    k = laplace_kernel(1.2, 2)
    t = random_tsg(np.random.default_rng(1), 2, 2, 5)
    P = inv_tsg(k, t).toarray()
    np.testing.assert_allclose(inv_tsg(k.scaled(c), t).toarray(), P / c, rtol=1e-10, atol=1e-12 * np.abs(P).max())


def test_regularized_solve_examples():
    P = inv_grid_1d(BF1.factors[0], XS3)
    K = kernel_matrix(BF1, np.array(XS3)[:, None])
    b = np.array([1.0, 0.0, 0.0])
    x = regularized_solve(P, DiagonalNoise.constant(1.0, 3), b)
    np.testing.assert_allclose(x, np.linalg.solve(K + np.eye(3), b), atol=1e-8)
    np.testing.assert_allclose(K @ x + x, b, atol=1e-8)
    big = regularized_solve(P, DiagonalNoise.constant(1e8, 3), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(big, np.array([1.0, 2.0, 3.0]) / 1e8, atol=1e-6)


def test_regularized_solve_random(rng):
    for _ in range(10):
        d = int(rng.integers(1, 4))
        k = random_kernel(rng, d)
        t = random_tsg(rng, d, 3 if d < 3 else 2)
        X = t.coords()
        s = rng.uniform(0.01, 2.0, t.size)
        b = rng.normal(size=(t.size, 2))
        got = regularized_solve(inv_tsg(k, t), DiagonalNoise(s), b)
        dense = np.linalg.solve(kernel_matrix(k, X) + np.diag(s), b)
        assert rel_err(got, dense) <= 1e-8


def test_regularized_solve_shape_errors():
    P = inv_grid_1d(BF1.factors[0], XS3)
    with pytest.raises(InvalidArgumentError):
        regularized_solve(P, DiagonalNoise(np.ones(2)), np.ones(3))
    with pytest.raises(InvalidArgumentError):
        regularized_solve(P, DiagonalNoise.constant(1.0, 3), np.ones(4))
    with pytest.raises(InvalidArgumentError):
        DiagonalNoise(np.array([1.0, 0.0]))


def test_sparse_types():
    v = SparseVector(4, np.array([1, 3]), np.array([2.0, -1.0]))
    assert v.toarray().tolist() == [0, 2, 0, -1]
    assert v.dot(np.arange(4.0)) == -1.0
    col = sp.csc_array(np.array([[0.0], [5.0]]))
    assert SparseVector.from_column(col).toarray().tolist() == [0, 5]
    P = SparsePrecision(sp.csr_array(np.array([[2.0, 1.0], [1.0, 3.0]])), ("a", "b"))
    assert P.n == 2 and P[0, 1] == 1.0
    np.testing.assert_array_equal(P @ np.ones(2), [3.0, 4.0])
