import numpy as np
import pytest

from bfly import linalg
from bfly.errors import InvalidRank, NotSquare, NotSymmetric
from bfly.rng import Rng


def random_matrix(rng, m, n):
    return rng.normals(m * n).reshape(m, n)


def test_as_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        linalg.as_matrix([[1.0, np.nan]])
    with pytest.raises(ValueError):
        linalg.as_matrix([[np.inf, 0.0]])


def test_svd_diagonal():
    res = linalg.svd(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(res.s, [3.0, 2.0, 1.0])
    np.testing.assert_allclose(res.u, np.eye(3))
    np.testing.assert_allclose(res.v, np.eye(3))


def test_svd_permutation():
    res = linalg.svd(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(res.s, [1.0, 1.0])


def test_svd_reconstruction_seeded():
    a = random_matrix(Rng(101), 8, 5)
    res = linalg.svd(a)
    err = np.abs(res.reconstruct() - a).max()
    assert err <= 1e-8 * (1.0 + np.linalg.norm(a))


def test_svd_orthonormal_and_sorted():
    a = random_matrix(Rng(55), 12, 9)
    res = linalg.svd(a)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(9), atol=1e-10)
    np.testing.assert_allclose(res.v.T @ res.v, np.eye(9), atol=1e-10)
    assert np.all(np.diff(res.s) <= 0)
    assert np.all(res.s >= 0)


def test_svd_roundtrip_many_sizes():
    rng = Rng(2024)
    for trial in range(1000):
        m = 1 + rng.randint_below(64)
        n = 1 + rng.randint_below(64)
        a = random_matrix(rng, m, n)
        res = linalg.svd(a)
        rel = np.linalg.norm(res.reconstruct() - a) / (1.0 + np.linalg.norm(a))
        assert rel <= 1e-8


def test_svd_deterministic_bytes():
    a = random_matrix(Rng(33), 10, 10)
    r1 = linalg.svd(a.copy())
    r2 = linalg.svd(a.copy())
    assert r1.u.tobytes() == r2.u.tobytes()
    assert r1.s.tobytes() == r2.s.tobytes()
    assert r1.v.tobytes() == r2.v.tobytes()


def test_trace_identity_frobenius():
    rng = Rng(77)
    for _ in range(20):
        a = random_matrix(rng, 6, 9)
        fro = linalg.fro_norm_sq(a)
        assert abs(np.trace(a @ a.T) - fro) <= 1e-8 * max(fro, 1.0)
        assert abs(np.sum(linalg.svd(a).s ** 2) - fro) <= 1e-8 * max(fro, 1.0)


def test_sym_eig_diagonal():
    w, _ = linalg.sym_eig(np.diag([5.0, 2.0]))
    np.testing.assert_allclose(w, [5.0, 2.0])


def test_sym_eig_closed_form():
    w, v = linalg.sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(w, [3.0, 1.0], atol=1e-12)
    a = np.array([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(a @ v, v * w, atol=1e-12)


def test_sym_eig_matches_singular_values_squared():
    x = random_matrix(Rng(404), 6, 4)
    w, _ = linalg.sym_eig(x @ x.T)
    s = linalg.svd(x).s
    np.testing.assert_allclose(w[:4], s**2, atol=1e-8)
    np.testing.assert_allclose(w[4:], 0.0, atol=1e-8)


def test_sym_eig_residual():
    a = random_matrix(Rng(88), 7, 7)
    a = a + a.T
    w, v = linalg.sym_eig(a)
    res = np.abs(a @ v - v * w).max()
    assert res <= 1e-8 * (1.0 + np.linalg.norm(a))


def test_sym_eig_errors():
    with pytest.raises(NotSquare):
        linalg.sym_eig(np.zeros((2, 3)))
    with pytest.raises(NotSymmetric):
        linalg.sym_eig(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_pinv_diagonal():
    np.testing.assert_allclose(
        linalg.pinv(np.diag([2.0, 4.0])), np.diag([0.5, 0.25]), atol=1e-12
    )


def test_pinv_singular_direction_zeroed():
    np.testing.assert_allclose(
        linalg.pinv(np.diag([1.0, 0.0])), np.diag([1.0, 0.0]), atol=1e-12
    )


def test_pinv_inverse_residual():
    a = random_matrix(Rng(5), 5, 5) + 3.0 * np.eye(5)
    err = np.abs(a @ linalg.pinv(a) - np.eye(5)).max()
    assert err <= 1e-8


def test_pinv_rcond_validation():
    with pytest.raises(ValueError):
        linalg.pinv(np.eye(2), rcond=0.0)
    with pytest.raises(ValueError):
        linalg.pinv(np.eye(2), rcond=1.5)


def test_best_rank_k_diagonal():
    out = linalg.best_rank_k(np.diag([3.0, 2.0, 1.0]), 2)
    np.testing.assert_allclose(out, np.diag([3.0, 2.0, 0.0]), atol=1e-12)
    resid = linalg.fro_norm_sq(np.diag([3.0, 2.0, 1.0]) - out)
    assert abs(resid - 1.0) <= 1e-12


def test_best_rank_k_full_rank_is_identity_map():
    a = random_matrix(Rng(9), 6, 4)
    np.testing.assert_allclose(linalg.best_rank_k(a, 4), a, atol=1e-8)


def test_best_rank_k_residual_matches_tail():
    a = random_matrix(Rng(10), 10, 7)
    s = linalg.svd(a).s
    resid = linalg.fro_norm_sq(a - linalg.best_rank_k(a, 3))
    assert abs(resid - np.sum(s[3:] ** 2)) <= 1e-10 * max(1.0, resid)


def test_best_rank_k_monotone_residual():
    a = random_matrix(Rng(11), 9, 9)
    resids = [linalg.fro_norm_sq(a - linalg.best_rank_k(a, k)) for k in range(1, 10)]
    assert all(r1 >= r2 - 1e-12 for r1, r2 in zip(resids, resids[1:]))


def test_best_rank_k_invalid():
    with pytest.raises(InvalidRank):
        linalg.best_rank_k(np.eye(3), 0)
    with pytest.raises(InvalidRank):
        linalg.best_rank_k(np.eye(3), 4)


def test_fro_norm_sq_examples():
    assert linalg.fro_norm_sq(np.zeros((3, 2))) == 0.0
    assert linalg.fro_norm_sq(np.eye(3)) == 3.0
    assert linalg.fro_norm_sq(np.array([[1.0, 2.0], [3.0, 4.0]])) == 30.0
