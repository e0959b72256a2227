import math

import numpy as np
import pytest

from dietattn.errors import DimensionError, NumericError
from dietattn.rng import Rng
from dietattn.tensor import (Matrix, add, hadamard, matmul, matmul_nt,
                             matmul_tn, max_abs_diff, numerical_rank,
                             randn_matrix, scale_by, singular_values,
                             softmax_rows, sub, svd, transpose)

from conftest import rand_matrix
from oracles import np_rank, np_softmax_rows, to_np, from_np


SHAPES = [(1, 1, 1), (2, 3, 4), (7, 5, 3), (16, 16, 16), (1, 9, 2)]


@pytest.mark.parametrize("m,k,n", SHAPES)
def test_matmul_matches_numpy(m, k, n):
    a = rand_matrix(m, k, 10 * m + k, "a")
    b = rand_matrix(k, n, 20 * k + n, "b")
    got = to_np(matmul(a, b))
    np.testing.assert_allclose(got, to_np(a) @ to_np(b), rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("m,k,n", SHAPES)
def test_matmul_nt_tn_match_numpy(m, k, n):
    a = rand_matrix(m, k, m + k, "a")
    b = rand_matrix(n, k, n + k, "b")
    np.testing.assert_allclose(to_np(matmul_nt(a, b)), to_np(a) @ to_np(b).T,
                               rtol=1e-13, atol=1e-13)
    c = rand_matrix(k, m, k + m + 1, "c")
    d = rand_matrix(k, n, k + n + 2, "d")
    np.testing.assert_allclose(to_np(matmul_tn(c, d)), to_np(c).T @ to_np(d),
                               rtol=1e-13, atol=1e-13)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Matrix(2, 3), Matrix(4, 2))


def test_elementwise_ops():
    a = rand_matrix(4, 5, 3, "a")
    b = rand_matrix(4, 5, 4, "b")
    np.testing.assert_array_equal(to_np(add(a, b)), to_np(a) + to_np(b))
    np.testing.assert_array_equal(to_np(sub(a, b)), to_np(a) - to_np(b))
    np.testing.assert_array_equal(to_np(hadamard(a, b)), to_np(a) * to_np(b))
    np.testing.assert_array_equal(to_np(scale_by(a, 2.5)), to_np(a) * 2.5)
    np.testing.assert_array_equal(to_np(transpose(a)), to_np(a).T)
    with pytest.raises(DimensionError):
        add(a, Matrix(5, 4))


def test_non_finite_result_rejected():
    a = Matrix(1, 2)
    a.data[0] = 1e308
    a.data[1] = 1e308
    b = Matrix(2, 1)
    b.data[0] = 1e308
    b.data[1] = 1e308
    with pytest.raises(NumericError):
        matmul(a, b)


def test_softmax_rows_matches_reference():
    a = rand_matrix(6, 9, 7, "s", scale=3.0)
    np.testing.assert_allclose(to_np(softmax_rows(a)),
                               np_softmax_rows(to_np(a)), rtol=1e-14)
    rows = to_np(softmax_rows(a)).sum(axis=1)
    np.testing.assert_allclose(rows, np.ones(6), rtol=1e-14)


def test_softmax_rows_large_values_stable():
    a = Matrix(2, 3)
    for i, v in enumerate([1000.0, 1001.0, 999.0, -1000.0, -1000.0, -1000.0]):
        a.data[i] = v
    out = to_np(softmax_rows(a))
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out[1], np.ones(3) / 3.0, rtol=1e-14)


def test_softmax_scale_argument():
    a = rand_matrix(3, 4, 11, "t")
    np.testing.assert_allclose(to_np(softmax_rows(a, scale=2.0)),
                               np_softmax_rows(to_np(a) / 2.0), rtol=1e-13)
    with pytest.raises(ValueError):
        softmax_rows(a, scale=0.0)


def test_equals_bitwise_distinguishes_signed_zero():
    a = Matrix(1, 1)
    b = Matrix(1, 1)
    assert a.equals_bitwise(b)
    b.data[0] = -0.0
    assert not a.equals_bitwise(b)
    assert max_abs_diff(a, b) == 0.0


@pytest.mark.parametrize("rows,cols", [(5, 5), (8, 3), (3, 8), (12, 7)])
def test_svd_reconstructs_and_matches_numpy(rows, cols):
    a = rand_matrix(rows, cols, rows * 31 + cols, "svd")
    u, s, v = svd(a)
    un, vn = to_np(u), to_np(v)
    recon = un @ np.diag(s) @ vn.T
    np.testing.assert_allclose(recon, to_np(a), rtol=1e-10, atol=1e-10)
    ref = np.linalg.svd(to_np(a), compute_uv=False)
    np.testing.assert_allclose(np.array(s), ref, rtol=1e-10, atol=1e-12)
    # orthonormal columns
    r = min(rows, cols)
    np.testing.assert_allclose(un.T @ un, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(vn.T @ vn, np.eye(r), atol=1e-10)


def test_singular_values_of_known_matrix():
    # diag(3, 2, 0) embedded in a 4x3
    a = Matrix(4, 3)
    a.data[0] = 3.0
    a.data[4] = 2.0
    s = singular_values(a)
    assert s[0] == pytest.approx(3.0, abs=1e-12)
    assert s[1] == pytest.approx(2.0, abs=1e-12)
    assert s[2] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("r", [0, 1, 3, 6])
def test_numerical_rank_constructed(r):
    n = 6
    rng = Rng(17 + r, "rank")
    acc = np.zeros((n, n))
    for i in range(r):
        u = np.array([rng.normal() for _ in range(n)])
        v = np.array([rng.normal() for _ in range(n)])
        acc += np.outer(u, v)
    m = from_np(acc)
    assert numerical_rank(m) == np_rank(acc) == r


def test_numerical_rank_tiny_rank_deficient():
    # repeated rows at 1e-6 magnitude stalled a naive Jacobi sweep once;
    # the zero-column floor has to keep this converging
    rng = Rng(5, "tiny")
    base = np.array([[rng.normal() for _ in range(8)] for _ in range(3)])
    a = 1e-6 * base[np.array([0, 0, 1, 1, 2, 2, 0, 1])]
    m = from_np(a)
    assert numerical_rank(m) == np_rank(a) == 3


def test_numerical_rank_tol_validation():
    with pytest.raises(ValueError):
        numerical_rank(Matrix(2, 2), rel_tol=0.0)
    with pytest.raises(ValueError):
        numerical_rank(Matrix(2, 2), rel_tol=1.0)
    assert numerical_rank(Matrix(3, 4)) == 0


def test_randn_matrix_deterministic():
    a = randn_matrix(4, 4, 0.5, seed=9)
    b = randn_matrix(4, 4, 0.5, seed=9)
    assert a.equals_bitwise(b)
    assert not randn_matrix(4, 4, 0.5, seed=10).equals_bitwise(a)
    assert to_np(randn_matrix(3, 3, 0.0, seed=1)).sum() == 0.0
    with pytest.raises(ValueError):
        randn_matrix(2, 2, -1.0, seed=0)


def test_matrix_copy_and_identity():
    a = rand_matrix(3, 3, 21, "c")
    b = a.copy()
    assert a.equals_bitwise(b)
    b.data[0] += 1.0
    assert not a.equals_bitwise(b)
    eye = Matrix.identity(4)
    np.testing.assert_array_equal(to_np(eye), np.eye(4))
