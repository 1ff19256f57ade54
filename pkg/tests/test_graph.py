import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bgr import graph
from bgr.graph import EmbeddingParams
from bgr.tensor import DomainError, ShapeError

# shared hand fixture: two nodes, two channels
F1_FEATS = np.array([[1.0, 2.0], [3.0, 4.0]])
F1_SCORES = np.array([0.5, 0.0])
F1_MAP = F1_FEATS.reshape(2, 1, 2)  # 2x1 pixels, 2 channels


def _random_instance(seed, n_max=64, c_max=8):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, n_max + 1))
    c = int(rng.integers(1, c_max + 1))
    feats = rng.standard_normal((n, c))
    scores = rng.uniform(0.0, 1.0, size=n)
    return feats, scores


class TestEmbed:
    def test_identity_embedding(self):
        params = EmbeddingParams(weight=np.eye(2), bias=np.zeros(2))
        out = graph.embed(F1_MAP, params)
        np.testing.assert_array_equal(out, F1_FEATS)

    def test_bias_only(self):
        params = EmbeddingParams(weight=np.zeros((2, 3)), bias=np.array([1.0, 2.0, 3.0]))
        out = graph.embed(F1_MAP, params)
        assert np.array_equal(out, np.tile([1.0, 2.0, 3.0], (2, 1)))

    def test_channel_mismatch(self):
        params = EmbeddingParams(weight=np.eye(3), bias=np.zeros(3))
        with pytest.raises(ShapeError):
            graph.embed(F1_MAP, params)

    def test_bias_length_checked(self):
        with pytest.raises(ShapeError):
            EmbeddingParams(weight=np.eye(2), bias=np.zeros(3))


class TestSimilarity:
    def test_fixture(self):
        np.testing.assert_array_equal(
            graph.similarity(F1_FEATS), [[5.0, 11.0], [11.0, 25.0]]
        )

    def test_orthogonal_rows_give_zero_off_diagonal(self):
        feats = np.array([[1.0, 0.0], [0.0, 2.0]])
        sim = graph.similarity(feats)
        assert sim[0, 1] == 0.0 and sim[1, 0] == 0.0

    def test_diagonal_is_squared_row_norm(self):
        feats, _ = _random_instance(0)
        sim = graph.similarity(feats)
        np.testing.assert_allclose(np.diag(sim), (feats**2).sum(axis=1), atol=1e-12)


class TestBoundaryReweight:
    def test_zero_scores_double_adjacency(self):
        sim = graph.similarity(F1_FEATS)
        np.testing.assert_array_equal(
            graph.boundary_reweight_dense(sim, np.zeros(2)), 2.0 * sim
        )

    def test_all_boundary_quadruples(self):
        sim = graph.similarity(F1_FEATS)
        np.testing.assert_array_equal(
            graph.boundary_reweight_dense(sim, np.ones(2)), 4.0 * sim
        )

    def test_fixture_exact(self):
        sim = graph.similarity(F1_FEATS)
        out = graph.boundary_reweight_dense(sim, F1_SCORES)
        assert np.array_equal(out, [[15.0, 27.5], [27.5, 50.0]])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            graph.boundary_reweight_dense(np.eye(3), np.zeros(2))

    def test_scores_outside_unit_interval_rejected(self):
        with pytest.raises(DomainError):
            graph.boundary_reweight_dense(np.eye(2), np.array([0.5, 1.2]))
        with pytest.raises(DomainError):
            graph.boundary_reweight_dense(np.eye(2), np.array([-0.1, 0.2]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_scalar_reweight_law(self, seed):
        feats, scores = _random_instance(seed, n_max=24, c_max=6)
        out = graph.boundary_reweight_dense(graph.similarity(feats), scores)
        n = feats.shape[0]
        for i in range(n):
            for j in range(n):
                expected = (2.0 + scores[i] + scores[j]) * float(feats[i] @ feats[j])
                assert abs(out[i, j] - expected) < 1e-10

    def test_symmetry_exact(self):
        for seed in range(10):
            feats, scores = _random_instance(seed, n_max=128)
            out = graph.boundary_reweight_dense(graph.similarity(feats), scores)
            assert np.array_equal(out, out.T)


class TestHatFeatures:
    def test_zero_scores_identity(self):
        np.testing.assert_array_equal(graph.hat_features(F1_FEATS, np.zeros(2)), F1_FEATS)

    def test_fixture(self):
        np.testing.assert_array_equal(
            graph.hat_features(F1_FEATS, F1_SCORES), [[1.5, 3.0], [3.0, 4.0]]
        )

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_factorization_identity(self, seed):
        # boosted @ feats^T + feats @ boosted^T must reproduce the dense
        # reweighted adjacency
        feats, scores = _random_instance(seed, n_max=48, c_max=8)
        boosted = graph.hat_features(feats, scores)
        lhs = boosted @ feats.T + feats @ boosted.T
        rhs = graph.boundary_reweight_dense(graph.similarity(feats), scores)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestDegrees:
    def test_factorized_fixture(self):
        boosted = graph.hat_features(F1_FEATS, F1_SCORES)
        np.testing.assert_allclose(
            graph.degree_factorized(F1_FEATS, boosted), [42.5, 77.5], atol=1e-12
        )

    def test_zero_scores_double_plain_row_sums(self):
        feats, _ = _random_instance(3)
        boosted = graph.hat_features(feats, np.zeros(feats.shape[0]))
        np.testing.assert_allclose(
            graph.degree_factorized(feats, boosted),
            2.0 * graph.similarity(feats).sum(axis=1),
            atol=1e-9,
        )

    def test_matches_dense_oracle(self):
        for seed in range(30):
            feats, scores = _random_instance(seed, n_max=100)
            boosted = graph.hat_features(feats, scores)
            dense = graph.degree_dense(
                graph.boundary_reweight_dense(graph.similarity(feats), scores)
            )
            np.testing.assert_allclose(
                graph.degree_factorized(feats, boosted), dense, atol=1e-9
            )

    def test_dense_fixture(self):
        np.testing.assert_array_equal(
            graph.degree_dense(np.array([[15.0, 27.5], [27.5, 50.0]])), [42.5, 77.5]
        )

    def test_dense_zero_matrix(self):
        np.testing.assert_array_equal(graph.degree_dense(np.zeros((3, 3))), np.zeros(3))

    def test_dense_identity(self):
        np.testing.assert_array_equal(graph.degree_dense(np.eye(4)), np.ones(4))

    def test_dense_requires_square(self):
        with pytest.raises(ShapeError):
            graph.degree_dense(np.ones((2, 3)))

    def test_factorized_shape_mismatch(self):
        with pytest.raises(ShapeError):
            graph.degree_factorized(np.ones((2, 2)), np.ones((3, 2)))


class TestBuildGraph:
    def test_invariant_fields(self):
        feats, scores = _random_instance(11)
        g = graph.build_graph(feats, scores)
        np.testing.assert_allclose(
            g.boosted, (1.0 + scores)[:, None] * feats, atol=1e-12
        )
        assert g.degrees.shape == (feats.shape[0],)

    def test_rejects_bad_scores(self):
        feats, _ = _random_instance(12)
        with pytest.raises(DomainError):
            graph.build_graph(feats, np.full(feats.shape[0], 1.5))


class TestPermutationEquivariance:
    def test_adjacency_and_degrees_permute(self):
        rng = np.random.default_rng(21)
        feats = rng.standard_normal((9, 4))
        scores = rng.uniform(0, 1, 9)
        perm = rng.permutation(9)
        base = graph.boundary_reweight_dense(graph.similarity(feats), scores)
        permuted = graph.boundary_reweight_dense(
            graph.similarity(feats[perm]), scores[perm]
        )
        np.testing.assert_allclose(permuted, base[np.ix_(perm, perm)], atol=1e-12)
        base_deg = graph.degree_factorized(feats, graph.hat_features(feats, scores))
        perm_deg = graph.degree_factorized(
            feats[perm], graph.hat_features(feats[perm], scores[perm])
        )
        np.testing.assert_allclose(perm_deg, base_deg[perm], atol=1e-9)
