import numpy as np
import pytest

from bfly import butterfly as bf
from bfly.errors import (
    DimensionMismatch,
    InvalidLayer,
    MalformedFile,
    NotPowerOfTwo,
)
from bfly.rng import Rng


def dense_layer_matrix(net, li):
    """Independent dense construction of one layer matrix."""
    n = net.n_pow2
    mat = np.zeros((n, n))
    lo, hi = bf.layer_pairs(n, li)
    w = net.weights[li]
    for g in range(n // 2):
        a, b, c, d = w[g]
        mat[lo[g], lo[g]] = a
        mat[lo[g], hi[g]] = b
        mat[hi[g], lo[g]] = c
        mat[hi[g], hi[g]] = d
    return mat


def dense_oracle(tb):
    """Materialization by explicit dense products of layer matrices."""
    n = tb.net.n_pow2
    m = np.eye(n)
    for li in range(tb.net.depth):
        m = dense_layer_matrix(tb.net, li) @ m
    return tb.scale * m[tb.kept][:, : tb.n_in]


def wht_recursive(x):
    """Textbook recursive normalized Walsh-Hadamard transform."""
    n = x.shape[0]
    if n == 1:
        return x.copy()
    half = wht_recursive(x[: n // 2]), wht_recursive(x[n // 2 :])
    return np.concatenate([half[0] + half[1], half[0] - half[1]]) / np.sqrt(2.0)


def test_connectivity_n4():
    assert bf.layer_connectivity(4, 0) == [(0, 1), (2, 3)]
    assert bf.layer_connectivity(4, 1) == [(0, 2), (1, 3)]


def test_connectivity_bit_rule_n16():
    for li in range(4):
        pairs = bf.layer_connectivity(16, li)
        assert len(pairs) == 8
        seen = set()
        for j1, j2 in pairs:
            assert j1 ^ j2 == 1 << li
            seen.update((j1, j2))
        assert seen == set(range(16))


def test_connectivity_errors():
    with pytest.raises(NotPowerOfTwo):
        bf.layer_connectivity(12, 0)
    with pytest.raises(InvalidLayer):
        bf.layer_connectivity(8, 3)
    with pytest.raises(InvalidLayer):
        bf.layer_connectivity(8, -1)


def test_identity_network():
    tb = bf.new_identity(4)
    x = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(tb.apply(x), x)
    np.testing.assert_array_equal(tb.materialize(), np.eye(4))
    np.testing.assert_array_equal(tb.apply_adjoint(x), x)


def test_hadamard_small():
    tb = bf.new_hadamard(2)
    np.testing.assert_allclose(
        tb.apply(np.array([1.0, 0.0])), [1 / np.sqrt(2)] * 2, atol=1e-15
    )
    tb4 = bf.new_hadamard(4)
    np.testing.assert_allclose(
        tb4.apply(np.ones(4)), [2.0, 0.0, 0.0, 0.0], atol=1e-14
    )


def test_hadamard_orthogonal():
    m = bf.new_hadamard(8).materialize()
    assert np.abs(m @ m.T - np.eye(8)).max() <= 1e-12


def test_hadamard_matches_recursive_oracle():
    rng = Rng(60)
    for n in (2, 4, 8, 16, 32):
        tb = bf.new_hadamard(n)
        x = rng.normals(n)
        np.testing.assert_allclose(tb.apply(x), wht_recursive(x), atol=1e-12)


def test_apply_matches_materialize_seeded():
    rng = Rng(7)
    for _ in range(60):
        n = 2 ** (1 + rng.randint_below(6))
        ell = 1 + rng.randint_below(n)
        tb = bf.random_truncated(n, n, ell, rng, scale=1.5)
        m = tb.materialize()
        for _ in range(3):
            x = rng.normals(n)
            np.testing.assert_allclose(tb.apply(x), m @ x, atol=1e-10)


def test_materialize_matches_dense_product_oracle():
    rng = Rng(42)
    tb = bf.random_truncated(16, 16, 16, rng)
    np.testing.assert_allclose(tb.materialize(), dense_oracle(tb), atol=1e-12)
    tb2 = bf.random_truncated(16, 11, 5, rng, scale=0.7)
    np.testing.assert_allclose(tb2.materialize(), dense_oracle(tb2), atol=1e-12)


def test_truncation_selection():
    tb = bf.TruncatedButterfly(
        bf.ButterflyNetwork.identity(8), kept=np.array([0]), n_in=8
    )
    x = np.arange(8.0) + 7.0
    np.testing.assert_array_equal(tb.apply(x), [7.0])


def test_padding_when_n_in_below_pow2():
    rng = Rng(3)
    tb = bf.random_truncated(8, 5, 4, rng)
    m = tb.materialize()
    assert m.shape == (4, 5)
    full = bf.TruncatedButterfly(tb.net, n_in=8, kept=tb.kept, scale=tb.scale)
    np.testing.assert_allclose(m, full.materialize()[:, :5], atol=1e-14)
    x = rng.normals(5)
    np.testing.assert_allclose(
        tb.apply(x), full.apply(np.concatenate([x, np.zeros(3)])), atol=1e-14
    )


def test_adjoint_identity():
    rng = Rng(8)
    for _ in range(30):
        n = 2 ** (1 + rng.randint_below(5))
        ell = 1 + rng.randint_below(n)
        n_in = 1 + rng.randint_below(n)
        tb = bf.random_truncated(n, n_in, ell, rng, scale=0.9)
        x = rng.normals(n_in)
        y = rng.normals(ell)
        lhs = float(np.dot(tb.apply(x), y))
        rhs = float(np.dot(x, tb.apply_adjoint(y)))
        assert abs(lhs - rhs) <= 1e-10 * (1.0 + abs(lhs))


def test_adjoint_matches_materialize_transpose():
    rng = Rng(9)
    tb = bf.random_truncated(32, 20, 9, rng, scale=1.2)
    m = tb.materialize()
    y = rng.normals(9)
    np.testing.assert_allclose(tb.apply_adjoint(y), m.T @ y, atol=1e-10)


def test_linearity():
    rng = Rng(10)
    tb = bf.random_truncated(16, 16, 7, rng)
    x, z = rng.normals(16), rng.normals(16)
    lhs = tb.apply(2.5 * x - 1.25 * z)
    rhs = 2.5 * tb.apply(x) - 1.25 * tb.apply(z)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_matrix_apply_matches_columnwise():
    rng = Rng(11)
    tb = bf.random_truncated(16, 12, 6, rng)
    x = rng.normals(12 * 5).reshape(12, 5)
    out = tb.apply(x)
    assert out.shape == (6, 5)
    for j in range(5):
        np.testing.assert_allclose(out[:, j], tb.apply(x[:, j]), atol=1e-12)


def test_dimension_mismatch():
    tb = bf.new_identity(8)
    with pytest.raises(DimensionMismatch):
        tb.apply(np.zeros(5))
    with pytest.raises(DimensionMismatch):
        tb.apply_adjoint(np.zeros(5))


def test_effective_weights_full():
    tb = bf.TruncatedButterfly(bf.ButterflyNetwork.identity(16))
    assert tb.effective_weight_count() == 2 * 16 * 4


def test_effective_weights_single_output():
    tb = bf.TruncatedButterfly(
        bf.ButterflyNetwork.identity(16), kept=np.array([5])
    )
    assert tb.effective_weight_count() == 2 + 4 + 8 + 16
    assert tb.effective_weight_count() <= 6 * 16


def test_effective_weights_bound_exhaustive_16():
    rng = Rng(12)
    n = 16
    for ell in (2, 4, 8, 16):
        kept = rng.subset(n, ell)
        tb = bf.TruncatedButterfly(bf.ButterflyNetwork.identity(n), kept=kept)
        bound = 2 * n * np.log2(ell) + 6 * n
        assert tb.effective_weight_count() <= bound


def test_weight_layer_count_definition():
    net = bf.ButterflyNetwork.identity(32)
    assert net.weights.shape == (5, 16, 4)
    assert net.weights[0].size == 2 * 32


def test_binary_roundtrip(tmp_path):
    rng = Rng(13)
    tb = bf.random_truncated(32, 27, 11, rng, scale=2.25)
    path = tmp_path / "net.bfly"
    bf.save_binary(tb, path)
    back = bf.load_binary(path)
    assert back.net.weights.tobytes() == tb.net.weights.tobytes()
    assert back.kept.tolist() == tb.kept.tolist()
    assert back.scale == tb.scale
    assert back.n_in == tb.n_in


def test_binary_malformed(tmp_path):
    path = tmp_path / "bad.bfly"
    path.write_bytes(b"NOTBF" + b"\x00" * 16)
    with pytest.raises(MalformedFile):
        bf.load_binary(path)
    path.write_bytes(b"BFLY1" + b"\x01" * 7)
    with pytest.raises(MalformedFile):
        bf.load_binary(path)


def test_json_roundtrip():
    rng = Rng(14)
    tb = bf.random_truncated(8, 8, 3, rng, scale=0.5)
    back = bf.from_json(bf.to_json(tb))
    assert back.net.weights.tobytes() == tb.net.weights.tobytes()
    assert back.kept.tolist() == tb.kept.tolist()


def test_cache_backward_matches_finite_differences():
    rng = Rng(15)
    for transpose in (False, True):
        tb = bf.random_truncated(8, 6, 4, rng, scale=1.1)
        x = rng.normals(4 if transpose else 6)
        target = rng.normals(6 if transpose else 4)

        def loss_value():
            out, _ = bf.forward_with_cache(tb, x, transpose=transpose)
            return float(np.sum((out - target) ** 2))

        out, acts = bf.forward_with_cache(tb, x, transpose=transpose)
        d_in, d_w = bf.backward_through(tb, acts, 2.0 * (out - target),
                                        transpose=transpose)
        h = 1e-6
        flat = tb.net.weights.ravel()
        for idx in range(0, flat.size, 7):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_value()
            flat[idx] = orig - h
            down = loss_value()
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            assert abs(fd - d_w.ravel()[idx]) <= 1e-5 * (1.0 + abs(fd))
        for idx in range(x.size):
            orig = x[idx]
            x[idx] = orig + h
            up = loss_value()
            x[idx] = orig - h
            down = loss_value()
            x[idx] = orig
            fd = (up - down) / (2 * h)
            assert abs(fd - d_in[idx]) <= 1e-5 * (1.0 + abs(fd))
