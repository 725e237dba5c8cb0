import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gridscope.core import FormatError
from gridscope.tensor import (
    check_mask, extract_fiber, extract_slab, format_tensor_text, held_out_relative_error,
    khatri_rao, parse_tensor_text, rank_one, read_mask, read_tensor, refold, relative_error,
    unfold, write_mask, write_tensor,
)


def _random(dims, seed=0):
    return np.random.default_rng(seed).standard_normal(dims)


def test_rank_one_zero_row_kills_slab():
    """a=(1,0), b=(1,1), c=(1) gives ones on the first horizontal slab only"""
    X = rank_one([1, 0], [1, 1], [1])
    assert X.shape == (2, 2, 1)
    assert_array_equal(X[0], np.ones((2, 1)))
    assert_array_equal(X[1], np.zeros((2, 1)))


def test_rank_one_scalar():
    assert rank_one([2], [3], [4]).item() == 24.0


def test_rank_one_matches_loop():
    rng = np.random.default_rng(1)
    a, b, c = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3)
    X = rank_one(a, b, c)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                assert X[i, j, k] == pytest.approx(a[i] * b[j] * c[k], rel=1e-15)


def test_rank_one_rejects_empty():
    with pytest.raises(ValueError):
        rank_one([], [1], [1])


def test_unfold_2x2x2_column_order():
    """Mode-1 column index is j + J*k."""
    X = np.arange(1, 9, dtype=float).reshape(2, 2, 2)  # X[i, j, k] = 1 + 4i + 2j + k
    U = unfold(X, 1)
    assert_array_equal(U, [[1, 3, 2, 4], [5, 7, 6, 8]])
    assert_array_equal(unfold(X, 2), [[1, 5, 2, 6], [3, 7, 4, 8]])
    assert_array_equal(unfold(X, 3), [[1, 5, 3, 7], [2, 6, 4, 8]])


@pytest.mark.parametrize("dims", [(3, 4, 5), (1, 6, 2), (8, 1, 7), (5, 5, 1)])
def test_unfold_matches_index_oracle(dims):
    X = _random(dims, seed=sum(dims))
    I, J, K = dims
    U1, U2, U3 = unfold(X, 1), unfold(X, 2), unfold(X, 3)
    for i in range(I):
        for j in range(J):
            for k in range(K):
                assert U1[i, j + J * k] == X[i, j, k]
                assert U2[j, i + I * k] == X[i, j, k]
                assert U3[k, i + I * j] == X[i, j, k]


@pytest.mark.parametrize("mode", [1, 2, 3])
def test_unfold_refold_round_trip(mode):
    X = _random((3, 4, 5))
    assert_array_equal(refold(unfold(X, mode), mode, X.shape), X)


def test_unfold_rank_one_khatri_rao_identity():
    rng = np.random.default_rng(2)
    a, b, c = rng.standard_normal((4, 1)), rng.standard_normal((3, 1)), rng.standard_normal((5, 1))
    X = rank_one(a, b, c)
    assert_allclose(unfold(X, 1), a @ khatri_rao(c, b).T, rtol=1e-14, atol=1e-15)
    assert_allclose(unfold(X, 2), b @ khatri_rao(c, a).T, rtol=1e-14, atol=1e-15)
    assert_allclose(unfold(X, 3), c @ khatri_rao(b, a).T, rtol=1e-14, atol=1e-15)


def test_unfold_rejects_bad_mode():
    with pytest.raises(ValueError):
        unfold(np.zeros((2, 2, 2)), 4)
    with pytest.raises(ValueError):
        unfold(np.zeros((2, 2)), 1)


def test_frobenius_norm_any_unfolding():
    X = _random((4, 3, 6), seed=5)
    direct = sum(X[i, j, k] ** 2 for i in range(4) for j in range(3) for k in range(6))
    for mode in (1, 2, 3):
        assert np.linalg.norm(unfold(X, mode)) ** 2 == pytest.approx(direct, rel=1e-12)


def test_khatri_rao_examples():
    assert_array_equal(khatri_rao([[2.0]], [[2.0]]), [[4.0]])
    assert_array_equal(khatri_rao([[1.0], [2.0]], [[3.0], [5.0]]).ravel(), [3, 5, 6, 10])


def test_khatri_rao_columns_are_kronecker():
    rng = np.random.default_rng(3)
    P, Q = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
    KR = khatri_rao(P, Q)
    assert KR.shape == (12, 2)
    for f in range(2):
        assert_allclose(KR[:, f], np.kron(P[:, f], Q[:, f]), rtol=1e-15)


def test_khatri_rao_rejects_column_mismatch():
    with pytest.raises(ValueError):
        khatri_rao(np.ones((2, 2)), np.ones((2, 3)))


def test_extract_slab_rank_one_frontal():
    a, b, c = np.array([1.0, 2.0]), np.array([3.0, -1.0, 0.5]), np.array([4.0, 7.0])
    assert_allclose(extract_slab(rank_one(a, b, c), "frontal", 0), c[0] * np.outer(a, b))


def test_extract_slab_single_nonzero():
    X = np.zeros((3, 4, 5))
    X[1, 2, 3] = 9.0
    S = extract_slab(X, "horizontal", 1)
    assert S.shape == (4, 5)
    assert np.count_nonzero(S) == 1 and S[2, 3] == 9.0


def test_extract_sections_match_loops():
    rng = np.random.default_rng(4)
    for _ in range(10):
        dims = tuple(int(d) for d in rng.integers(1, 9, size=3))
        X = rng.standard_normal(dims)
        I, J, K = dims
        i, j, k = (int(rng.integers(d)) for d in dims)
        H, V, Fr = extract_slab(X, "horizontal", i), extract_slab(X, "vertical", j), extract_slab(X, "frontal", k)
        assert H.shape == (J, K) and V.shape == (I, K) and Fr.shape == (I, J)
        for jj in range(J):
            for kk in range(K):
                assert H[jj, kk] == X[i, jj, kk]
        for ii in range(I):
            for kk in range(K):
                assert V[ii, kk] == X[ii, j, kk]
            for jj in range(J):
                assert Fr[ii, jj] == X[ii, jj, k]
        fib = extract_fiber(X, i, j)
        assert [fib[kk] for kk in range(K)] == [X[i, j, kk] for kk in range(K)]


def test_extract_fiber_rank_one_and_zero():
    a, b, c = np.array([1.0, 2.0]), np.array([3.0, 5.0]), np.array([1.0, -1.0, 2.0])
    assert_allclose(extract_fiber(rank_one(a, b, c), 1, 0), a[1] * b[0] * c)
    assert_array_equal(extract_fiber(np.zeros((2, 2, 4)), 0, 1), np.zeros(4))


@pytest.mark.parametrize("kind,index", [("horizontal", 3), ("vertical", -1), ("frontal", 5)])
def test_extract_slab_out_of_range(kind, index):
    with pytest.raises(IndexError):
        extract_slab(np.zeros((3, 4, 5)), kind, index)


def test_extract_slab_bad_kind_and_fiber_range():
    with pytest.raises(ValueError):
        extract_slab(np.zeros((2, 2, 2)), "diagonal", 0)
    with pytest.raises(IndexError):
        extract_fiber(np.zeros((2, 2, 2)), 2, 0)


def test_relative_error_examples():
    X = _random((3, 4, 5))
    assert relative_error(X, X) == 0.0
    assert relative_error(X, np.zeros_like(X)) == 1.0
    assert relative_error(X, 2 * X) == pytest.approx(1.0, rel=1e-15)
    with pytest.raises(ValueError):
        relative_error(np.zeros((2, 2, 2)), np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        relative_error(X, X[:2])


def test_held_out_error_ignores_observed_entries():
    X = _random((3, 4, 5))
    M = np.zeros(X.shape, dtype=bool)
    M[0] = True
    Xhat = X.copy()
    Xhat[0] += 100.0
    assert held_out_relative_error(X, Xhat, M) == 0.0


def test_check_mask_rejects_non_binary():
    with pytest.raises(ValueError):
        check_mask(np.full((2, 2, 2), 2))
    with pytest.raises(ValueError):
        check_mask(np.ones((2, 2, 2)), (2, 2, 3))
    assert check_mask(np.ones((1, 1, 1), dtype=int)).dtype == bool


def test_text_layout_i_fastest():
    X = np.arange(8, dtype=float).reshape(2, 2, 2)
    lines = format_tensor_text(X).splitlines()
    assert lines[0] == "2 2 2"
    assert [float(v) for v in lines[1:]] == [0, 4, 2, 6, 1, 5, 3, 7]


@pytest.mark.parametrize("suffix", [".txt", ".npy"])
def test_tensor_files_are_bit_exact(tmp_path, suffix):
    X = _random((3, 4, 5)) * 1e3
    X[0, 0, 0] = 1.0 / 3.0
    path = tmp_path / f"x{suffix}"
    write_tensor(X, path)
    assert_array_equal(read_tensor(path), X)


def test_mask_files(tmp_path):
    M = np.random.default_rng(0).random((2, 3, 4)) < 0.5
    write_mask(M, tmp_path / "m.npy")
    assert np.load(tmp_path / "m.npy").dtype == np.uint8
    assert_array_equal(read_mask(tmp_path / "m.npy"), M)
    write_mask(M, tmp_path / "m.txt")
    assert_array_equal(read_mask(tmp_path / "m.txt"), M)


def test_parse_errors_are_line_anchored():
    with pytest.raises(FormatError, match=r"x\.txt:3: not a number"):
        parse_tensor_text("1 1 2\n1.0\nabc\n", "x.txt")
    with pytest.raises(FormatError, match=r"x\.txt:1"):
        parse_tensor_text("1 1\n1.0\n", "x.txt")
    with pytest.raises(FormatError, match="expected 4 values"):
        parse_tensor_text("1 2 2\n1\n2\n3\n", "x.txt")


def test_read_mask_rejects_non_binary(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 1 2\n1\n0.5\n")
    with pytest.raises(FormatError):
        read_mask(path)
