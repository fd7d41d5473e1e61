"""Tests for rerank module."""

import numpy as np
import pytest

from fgreid.exceptions import EvaluationError
from fgreid.rerank import k_reciprocal_neighbors, k_reciprocal_rerank, pairwise_distance


@pytest.fixture
def clusters():
    rng = np.random.default_rng(4)
    centers = np.eye(8)[:2] * 5.0
    gallery = np.concatenate([centers[0] + rng.normal(scale=0.3, size=(10, 8)),
                              centers[1] + rng.normal(scale=0.3, size=(10, 8))])
    queries = centers + rng.normal(scale=0.3, size=(2, 8))
    return queries, gallery


class TestPairwiseDistance:
    def test_cosine(self):
        d = pairwise_distance([[1.0, 0.0]], [[0.6, 0.8], [2.0, 0.0], [-1.0, 0.0]])
        np.testing.assert_allclose(d, [[0.4, 0.0, 2.0]], atol=1e-12)

    def test_euclidean(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
        brute = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
        np.testing.assert_allclose(pairwise_distance(a, b, 'euclidean'), brute, atol=1e-10)

    def test_width_mismatch(self):
        with pytest.raises(EvaluationError):
            pairwise_distance(np.ones((2, 3)), np.ones((2, 4)))

    def test_unknown_metric(self):
        with pytest.raises(EvaluationError):
            pairwise_distance(np.ones((1, 2)), np.ones((1, 2)), 'manhattan')


class TestReciprocalNeighbors:
    def test_only_mutual_neighbours_kept(self):
        # 0 and 1 are mutual; 2's nearest is 1 but 1 does not list 2 within k=1
        initial_rank = np.array([[0, 1, 2], [1, 0, 2], [2, 1, 0]])
        assert list(k_reciprocal_neighbors(initial_rank, 0, 1)) == [0, 1]
        assert list(k_reciprocal_neighbors(initial_rank, 2, 1)) == [2]


class TestRerank:
    def test_lambda_one_returns_original_distance(self, clusters):
        queries, gallery = clusters
        revised = k_reciprocal_rerank(queries, gallery, k1=6, k2=3, lambda_value=1.0)
        np.testing.assert_allclose(revised, pairwise_distance(queries, gallery), atol=1e-12)

    def test_shape_and_nonnegative(self, clusters):
        queries, gallery = clusters
        revised = k_reciprocal_rerank(queries, gallery, k1=6, k2=3, lambda_value=0.3)
        assert revised.shape == (2, 20)
        assert np.all(revised >= 0.0)
        assert np.all(np.isfinite(revised))

    @pytest.mark.parametrize('metric', ['cosine', 'euclidean'])
    def test_separated_clusters_keep_their_top_match(self, clusters, metric):
        queries, gallery = clusters
        revised = k_reciprocal_rerank(queries, gallery, k1=6, k2=3, lambda_value=0.3, metric=metric)
        assert np.argmin(revised[0]) < 10
        assert np.argmin(revised[1]) >= 10
        # every same-cluster item beats every other-cluster item
        assert revised[0, :10].max() < revised[0, 10:].min()

    def test_k2_one_skips_query_expansion(self, clusters):
        queries, gallery = clusters
        revised = k_reciprocal_rerank(queries, gallery, k1=6, k2=1)
        assert revised.shape == (2, 20)

    @pytest.mark.parametrize('k1, k2, lam', [
        (6, 6, 0.3),
        (3, 6, 0.3),
        (6, 0, 0.3),
        (6, 3, 1.5),
        (6, 3, -0.1),
        (20, 3, 0.3),
    ])
    def test_invalid_parameters(self, clusters, k1, k2, lam):
        queries, gallery = clusters
        with pytest.raises(EvaluationError):
            k_reciprocal_rerank(queries, gallery, k1=k1, k2=k2, lambda_value=lam)
