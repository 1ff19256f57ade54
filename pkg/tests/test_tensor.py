import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bgr import tensor
from bgr.tensor import DomainError, ShapeError


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tensor.matmul(a, np.eye(2)), a)

    def test_ones_vector_gives_row_sums(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = tensor.matmul(a, np.ones((2, 1)))
        np.testing.assert_array_equal(out, [[3.0], [7.0]])

    def test_gram_fixture(self):
        h = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tensor.matmul(h, h.T), [[5.0, 11.0], [11.0, 25.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            tensor.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.standard_normal((5, 4))
            b = rng.standard_normal((4, 6))
            c = rng.standard_normal((6, 3))
            left = tensor.matmul(tensor.matmul(a, b), c)
            right = tensor.matmul(a, tensor.matmul(b, c))
            np.testing.assert_allclose(left, right, atol=1e-9)

    def test_transpose_product_rule(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.standard_normal((4, 5))
            b = rng.standard_normal((5, 3))
            lhs = tensor.matmul(a, b).T
            rhs = tensor.matmul(b.T, a.T)
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestRowScale:
    def test_unit_scaling(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tensor.row_scale(a, np.ones(2)), a)

    def test_direct_definition(self):
        out = tensor.row_scale(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.5, 0.0]))
        np.testing.assert_array_equal(out, [[0.5, 1.0], [0.0, 0.0]])

    def test_boost_fixture(self):
        h = np.array([[1.0, 2.0], [3.0, 4.0]])
        boosted = tensor.row_scale(h, 1.0 + np.array([0.5, 0.0]))
        np.testing.assert_array_equal(boosted, [[1.5, 3.0], [3.0, 4.0]])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            tensor.row_scale(np.ones((3, 2)), np.ones(2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 10_000))
    def test_equals_diag_matmul(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((rows, cols))
        s = rng.standard_normal(rows)
        np.testing.assert_allclose(
            tensor.row_scale(a, s), tensor.matmul(np.diag(s), a), atol=1e-12
        )


class TestReshape:
    def test_single_pixel(self):
        x = np.arange(3.0).reshape(1, 1, 3)
        out = tensor.reshape_hw_to_nodes(x)
        np.testing.assert_array_equal(out, [[0.0, 1.0, 2.0]])

    def test_row_major_order(self):
        x = np.array([[[1.0, 2.0]], [[3.0, 4.0]]])  # 2x1x2
        np.testing.assert_array_equal(
            tensor.reshape_hw_to_nodes(x), [[1.0, 2.0], [3.0, 4.0]]
        )

    def test_round_trip_is_bit_exact(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 7, 3))
        back = tensor.reshape_nodes_to_hw(tensor.reshape_hw_to_nodes(x), 5, 7)
        assert np.array_equal(back, x)

    def test_wrong_row_count(self):
        with pytest.raises(ShapeError):
            tensor.reshape_nodes_to_hw(np.ones((5, 2)), 2, 2)


class TestSeededRandom:
    def test_same_seed_bit_identical(self):
        a = tensor.seeded_random(6, 4, seed=42)
        b = tensor.seeded_random(6, 4, seed=42)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = tensor.seeded_random(6, 4, seed=1)
        b = tensor.seeded_random(6, 4, seed=2)
        assert np.any(a != b)

    def test_uniform_bounded(self):
        a = tensor.seeded_random(50, 50, seed=3, spread=0.25)
        assert np.abs(a).max() <= 0.25

    def test_normal_distribution_available(self):
        a = tensor.seeded_random(10, 10, seed=4, distribution="normal")
        assert np.isfinite(a).all()

    def test_unknown_distribution(self):
        with pytest.raises(DomainError):
            tensor.seeded_random(2, 2, seed=0, distribution="cauchy")


class TestFixtureFiles:
    def test_tensor_round_trip(self, tmp_path):
        a = tensor.seeded_random(4, 3, seed=9)
        path = tmp_path / "t.txt"
        tensor.save_tensor(path, a)
        assert path.read_text().splitlines()[0] == "4 3"
        assert np.array_equal(tensor.load_tensor(path), a)

    def test_feature_map_round_trip(self, tmp_path):
        x = tensor.seeded_random(6, 6, seed=10).reshape(3, 4, 3)
        path = tmp_path / "f.txt"
        tensor.save_feature_map(path, x)
        assert path.read_text().splitlines()[0] == "3 4 3"
        assert np.array_equal(tensor.load_feature_map(path), x)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("2 2\n1.0 2.0 3.0\n")
        with pytest.raises(ShapeError):
            tensor.load_tensor(path)


class TestTracker:
    def test_matmul_costs(self):
        a = np.ones((3, 4))
        b = np.ones((4, 5))
        with tensor.track() as stats:
            tensor.matmul(a, b)
        assert stats.flops == 3 * 5 * 7
        assert stats.alloc_elems == 15
        assert stats.peak_alloc_elems == 15

    def test_peak_is_max_single_allocation(self):
        with tensor.track() as stats:
            tensor.matmul(np.ones((2, 2)), np.ones((2, 2)))
            tensor.matmul(np.ones((4, 4)), np.ones((4, 4)))
            tensor.matmul(np.ones((3, 3)), np.ones((3, 3)))
        assert stats.peak_alloc_elems == 16
        assert stats.alloc_elems == 4 + 16 + 9

    def test_no_tracking_outside_context(self):
        with tensor.track() as stats:
            pass
        tensor.matmul(np.ones((2, 2)), np.ones((2, 2)))
        assert stats.flops == 0
