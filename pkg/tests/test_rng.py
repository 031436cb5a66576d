import numpy as np
import pytest

from bfly.rng import Rng


def test_same_seed_same_stream():
    a = Rng(1234)
    b = Rng(1234)
    assert [a.u64() for _ in range(20)] == [b.u64() for _ in range(20)]


def test_different_seeds_differ():
    assert Rng(1).u64() != Rng(2).u64()


def test_bulk_matches_scalar_path():
    a = Rng(99)
    b = Rng(99)
    bulk = a.uniforms(40)
    singles = np.array([b.uniform() for _ in range(40)])
    np.testing.assert_array_equal(bulk, singles)


def test_uniform_range_and_mean():
    u = Rng(7).uniforms(20000)
    assert np.all(u >= 0.0) and np.all(u < 1.0)
    assert abs(u.mean() - 0.5) < 0.01


def test_normals_moments():
    z = Rng(11).normals(50000)
    assert abs(z.mean()) < 0.02
    assert abs(z.std() - 1.0) < 0.02


def test_normals_odd_count():
    assert Rng(3).normals(7).shape == (7,)


def test_rademacher_values():
    r = Rng(5).rademacher(1000)
    assert set(np.unique(r)) == {-1.0, 1.0}
    assert abs(r.mean()) < 0.1


def test_randint_below_range():
    rng = Rng(13)
    draws = [rng.randint_below(10) for _ in range(1000)]
    assert min(draws) == 0 and max(draws) == 9


def test_randint_below_rejects_nonpositive():
    with pytest.raises(ValueError):
        Rng(0).randint_below(0)


def test_subset_sorted_distinct():
    rng = Rng(21)
    for _ in range(50):
        s = rng.subset(32, 7)
        assert s.size == 7
        assert np.all(np.diff(s) > 0)
        assert s[0] >= 0 and s[-1] < 32


def test_subset_uniform_coverage():
    rng = Rng(42)
    counts = np.zeros(16)
    n_draws = 4000
    for _ in range(n_draws):
        counts[rng.subset(16, 4)] += 1
    expected = n_draws * 4 / 16
    assert np.all(np.abs(counts - expected) < 0.15 * expected)


def test_subset_bad_size():
    with pytest.raises(ValueError):
        Rng(0).subset(4, 5)


def test_permutation_valid():
    p = Rng(17).permutation(50)
    assert sorted(p.tolist()) == list(range(50))


def test_unit_vector_norm():
    v = Rng(19).unit_vector(33)
    assert abs(np.linalg.norm(v) - 1.0) < 1e-12


def test_spawn_deterministic_and_independent():
    parent = Rng(1000)
    c1 = parent.spawn(0)
    c2 = parent.spawn(1)
    c1b = Rng(1000).spawn(0)
    assert c1.u64() == c1b.u64()
    seq1 = [Rng(1000).spawn(0).u64() for _ in range(1)]
    assert c2.u64() not in seq1
