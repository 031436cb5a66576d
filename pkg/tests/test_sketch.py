import numpy as np
import pytest

from bfly import datagen, linalg, sketch
from bfly.errors import (
    DegenerateSpectrum,
    DimensionMismatch,
    EmptyTestSet,
    InvalidRank,
    MalformedFile,
)
from bfly.grad import TrainConfig
from bfly.rng import Rng


def gaussian(rng, m, n):
    return rng.normals(m * n).reshape(m, n)


def optimal_sketch_for(x, k):
    """B whose rows span the optimal rank-k row space of X."""
    res = linalg.svd(x)
    return sketch.GaussianSketch(res.u[:, :k].T)


def test_rank_k_with_optimal_sketch_recovers_best():
    rng = Rng(1)
    x = gaussian(rng, 12, 9)
    k = 3
    best = linalg.best_rank_k(x, k)
    out = sketch.sketch_rank_k(optimal_sketch_for(x, k), x, k)
    np.testing.assert_allclose(out, best, atol=1e-8)


def test_rank_k_full_invertible_sketch():
    rng = Rng(2)
    n = 8
    x = gaussian(rng, n, 10)
    b = sketch.GaussianSketch(gaussian(rng, n, n) + 2.0 * np.eye(n))
    out = sketch.sketch_rank_k(b, x, 4)
    np.testing.assert_allclose(out, linalg.best_rank_k(x, 4), atol=1e-7)


def test_rank_k_countsketch_residual_dominates_optimum():
    rng = Rng(3)
    for trial in range(10):
        x = datagen.gaussian_rank_r(24, 18, 8, rng)
        b = sketch.sample_baseline("countsketch", 10, 24, rng)
        resid = sketch.sketch_residual(b, x, 10)
        s = linalg.svd(x).s
        delta = float(np.sum(s[10:] ** 2))
        assert resid >= delta - 1e-8


def test_rank_k_invalid_rank():
    b = sketch.sample_baseline("countsketch", 4, 8, Rng(4))
    with pytest.raises(InvalidRank):
        sketch.sketch_rank_k(b, np.eye(8), 5)


def test_rank_k_zero_matrix():
    b = sketch.sample_baseline("countsketch", 3, 6, Rng(5))
    out = sketch.sketch_rank_k(b, np.zeros((6, 4)), 2)
    assert np.abs(out).max() == 0.0


def test_rowspace_invariance():
    rng = Rng(6)
    x = gaussian(rng, 16, 12)
    b = sketch.sample_baseline("gaussian", 5, 16, rng)
    t = gaussian(rng, 5, 5) + 3.0 * np.eye(5)
    twisted = sketch.GaussianSketch(t @ b.matrix)
    a1 = sketch.sketch_rank_k(b, x, 3)
    a2 = sketch.sketch_rank_k(twisted, x, 3)
    np.testing.assert_allclose(a1, a2, atol=1e-8)


def test_err_metric_optimal_is_zero():
    rng = Rng(7)
    x = gaussian(rng, 12, 9)
    b = optimal_sketch_for(x, 3)
    err = sketch.err_metric(b, [x], 3)
    assert abs(err) <= 1e-8


def test_err_metric_zero_sketch():
    rng = Rng(8)
    x = gaussian(rng, 10, 6)
    zero = sketch.GaussianSketch(np.zeros((4, 10)))
    err = sketch.err_metric(zero, [x], 2)
    s = linalg.svd(x).s
    # residual of the zero sketch is |X|^2; subtracting App leaves the
    # captured top-k energy.
    expect = linalg.fro_norm_sq(x) - float(np.sum(s[2:] ** 2))
    assert abs(err - expect) <= 1e-8


def test_err_metric_nonnegative():
    rng = Rng(9)
    mats = [datagen.noisy_rank_r(16, 12, 4, 0.02, rng) for _ in range(5)]
    for kind in ("countsketch", "gaussian"):
        b = sketch.sample_baseline(kind, 6, 16, rng)
        assert sketch.err_metric(b, mats, 4) >= -1e-8


def test_err_metric_empty():
    b = sketch.sample_baseline("gaussian", 3, 8, Rng(10))
    with pytest.raises(EmptyTestSet):
        sketch.err_metric(b, [], 2)


def test_svd_backward_zero_gradient():
    s_mat = gaussian(Rng(11), 6, 8)
    out = sketch.svd_backward(s_mat, np.zeros((8, 6)))
    assert np.abs(out).max() == 0.0


def test_svd_backward_matches_fd_2x2():
    s_mat = np.diag([2.0, 1.0])
    c = np.array([[0.3, -0.2], [0.1, 0.4]])

    def loss_of(m):
        return float(np.sum(c * linalg.svd(m).v))

    grad = sketch.svd_backward(s_mat, c)
    h = 1e-6
    for idx in range(4):
        orig = s_mat.ravel()[idx]
        s_mat.ravel()[idx] = orig + h
        up = loss_of(s_mat)
        s_mat.ravel()[idx] = orig - h
        down = loss_of(s_mat)
        s_mat.ravel()[idx] = orig
        fd = (up - down) / (2 * h)
        assert abs(fd - grad.ravel()[idx]) <= 1e-5 * (1.0 + abs(fd))


@pytest.mark.parametrize("shape", [(5, 9), (9, 5), (7, 7)])
def test_svd_backward_matches_fd_random(shape):
    rng = Rng(12)
    s_mat = gaussian(rng, *shape)
    q = min(shape)
    c = gaussian(rng, shape[1], q)

    def loss_of(m):
        return float(np.sum(c * linalg.svd(m).v))

    grad = sketch.svd_backward(s_mat, c)
    h = 1e-6
    worst = 0.0
    for idx in range(s_mat.size):
        orig = s_mat.ravel()[idx]
        s_mat.ravel()[idx] = orig + h
        up = loss_of(s_mat)
        s_mat.ravel()[idx] = orig - h
        down = loss_of(s_mat)
        s_mat.ravel()[idx] = orig
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - grad.ravel()[idx]) / max(1e-8, abs(fd)))
    assert worst <= 1e-5


def test_svd_backward_degenerate_raises():
    s_mat = np.diag([1.0, 1.0])  # equal singular values
    c = np.array([[0.0, 1.0], [-1.0, 0.0]])  # antisymmetric coupling
    with pytest.raises(DegenerateSpectrum):
        sketch.svd_backward(s_mat, c, on_degenerate="raise")
    out = sketch.svd_backward(s_mat, c, on_degenerate="clamp")
    assert np.all(np.isfinite(out))


def test_svd_backward_shape_validation():
    with pytest.raises(DimensionMismatch):
        sketch.svd_backward(np.eye(3), np.zeros((4, 3)))


def test_end_to_end_sketch_gradient_fd():
    rng = Rng(13)
    x = gaussian(rng, 16, 16)
    sk = sketch.init_sketch("butterfly", ell=6, n=16, rng=rng)
    k = 3
    _, d_s, acts = sketch._loss_and_sketch_grad(sk, x, k, sketch.GAP_MIN_REL,
                                                "clamp")
    from bfly.butterfly import backward_through

    _, d_w = backward_through(sk.tb, acts, d_s)
    h = 1e-6
    w = sk.tb.net.weights
    worst = 0.0
    for idx in range(0, w.size, 5):
        orig = w.ravel()[idx]
        w.ravel()[idx] = orig + h
        up = sketch.sketch_residual(sk, x, k)
        w.ravel()[idx] = orig - h
        down = sketch.sketch_residual(sk, x, k)
        w.ravel()[idx] = orig
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - d_w.ravel()[idx]) / max(1e-4, abs(fd)))
    assert worst <= 1e-4


def test_energy_loss_identity():
    rng = Rng(14)
    x = gaussian(rng, 12, 10)
    sk = sketch.init_sketch("sparse", ell=5, n=12, rng=rng, nnz=2)
    loss, _, _ = sketch._loss_and_sketch_grad(sk, x, 3, sketch.GAP_MIN_REL,
                                              "clamp")
    assert abs(loss - sketch.sketch_residual(sk, x, 3)) <= 1e-8


def test_train_sketch_exact_rank_feasible():
    # Identical exactly rank-k matrices: the FJLT init already spans the
    # row space, so the loss starts and stays at ~0.
    rng = Rng(15)
    x = datagen.gaussian_rank_r(16, 12, 3, rng)
    cfg = TrainConfig(optimizer="adam", learning_rate=0.01, max_steps=30)
    result = sketch.train_sketch([x, x, x], "butterfly", ell=4, k=3,
                                 cfg=cfg, rng=rng)
    assert result.trace.final_loss <= 1e-6


def test_train_sketch_loss_decreases():
    rng = Rng(16)
    mats = [datagen.noisy_rank_r(16, 12, 3, 0.05, rng) for _ in range(6)]
    mats = datagen.normalize_top_singular(mats)
    cfg = TrainConfig(optimizer="adam", learning_rate=0.02, max_steps=60,
                      keep_best=True)
    for kind, nnz in (("butterfly", 1), ("sparse", 1), ("sparse", 4)):
        result = sketch.train_sketch(mats, kind, ell=5, k=3, cfg=cfg,
                                     rng=rng, nnz=nnz)
        assert result.trace.final_loss <= result.trace.losses[0] + 1e-12


def test_train_sketch_beats_countsketch_on_heldout():
    rng = Rng(17)
    train = [datagen.noisy_rank_r(32, 24, 4, 0.02, rng) for _ in range(12)]
    test = [datagen.noisy_rank_r(32, 24, 4, 0.02, rng) for _ in range(6)]
    train = datagen.normalize_top_singular(train)
    test = datagen.normalize_top_singular(test)
    cfg = TrainConfig(optimizer="adam", learning_rate=0.03, max_steps=120,
                      keep_best=True)
    result = sketch.train_sketch(train, "butterfly", ell=6, k=4, cfg=cfg,
                                 rng=rng)
    base = sketch.sample_baseline("countsketch", 6, 32, rng)
    assert (sketch.err_metric(result.sketch, test, 4)
            < sketch.err_metric(base, test, 4))


def test_countsketch_structure():
    b = sketch.sample_baseline("countsketch", 6, 40, Rng(18))
    m = b.materialize()
    nonzeros = np.count_nonzero(m, axis=0)
    np.testing.assert_array_equal(nonzeros, np.ones(40))
    assert set(np.unique(np.abs(m[m != 0]))) == {1.0}
    col_norms = np.linalg.norm(m, axis=0)
    np.testing.assert_allclose(col_norms, 1.0)


def test_gaussian_baseline_variance():
    b = sketch.sample_baseline("gaussian", 50, 300, Rng(19))
    var = float(np.var(b.matrix))
    assert abs(var - 1.0 / 50) <= 0.2 / 50


def test_baseline_dim_check():
    with pytest.raises(DimensionMismatch):
        sketch.sample_baseline("countsketch", 10, 5, Rng(20))


def test_sparse_matmul_matches_materialize():
    rng = Rng(21)
    b = sketch.init_sketch("sparse", ell=7, n=20, rng=rng, nnz=3)
    x = gaussian(rng, 20, 9)
    np.testing.assert_allclose(b.matmul(x), b.materialize() @ x, atol=1e-12)


def test_coo_roundtrip(tmp_path):
    rng = Rng(22)
    b = sketch.init_sketch("sparse", ell=5, n=12, rng=rng, nnz=2)
    path = tmp_path / "sk.coo"
    sketch.save_sketch_coo(b, path)
    back = sketch.load_sketch_coo(path)
    np.testing.assert_array_equal(back.positions, b.positions)
    np.testing.assert_array_equal(back.values, b.values)
    path.write_text("")
    with pytest.raises(MalformedFile):
        sketch.load_sketch_coo(path)
