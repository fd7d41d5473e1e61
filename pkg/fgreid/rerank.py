"""
k-reciprocal re-ranking of query/gallery distances.

Neighbour sets are built over the joint query+gallery pool; each point is
encoded as a sparse weight vector over its (expanded) k-reciprocal
neighbours, query-expanded over its k2 nearest neighbours, and pairs are
compared by Jaccard distance. The result blends the original distance and
the Jaccard distance:

    d* = lambda * d_orig + (1 - lambda) * d_jaccard
"""

import logging

import numpy as np

from .exceptions import EvaluationError

logger = logging.getLogger(__name__)


def pairwise_distance(a, b, metric='cosine'):
    """Cosine distance (1 - cos) or Euclidean distance between rows of a and b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise EvaluationError(f"embedding widths differ: {a.shape} vs {b.shape}")
    if metric == 'cosine':
        a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
        return np.clip(1.0 - a @ b.T, 0.0, 2.0)
    if metric == 'euclidean':
        sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
        return np.sqrt(np.maximum(sq, 0.0))
    raise EvaluationError(f"unknown distance metric {metric!r}")


def k_reciprocal_neighbors(initial_rank, index, k):
    forward = initial_rank[index, :k + 1]
    backward = initial_rank[forward, :k + 1]
    return forward[np.any(backward == index, axis=1)]


def k_reciprocal_rerank(q_embeddings, g_embeddings, k1=20, k2=6, lambda_value=0.3, metric='cosine'):
    """
    Re-rank query/gallery distances with k-reciprocal encoding.

    Args:
        q_embeddings: (num_query, dim)
        g_embeddings: (num_gallery, dim)
        k1: neighbourhood size for reciprocal sets
        k2: query-expansion neighbourhood size
        lambda_value: weight of the original distance
        metric: 'cosine' or 'euclidean' original distance

    Returns:
        (num_query, num_gallery) revised distances

    Raises:
        EvaluationError: k1 <= k2, k2 < 1, lambda outside [0, 1], or
            k1 not smaller than the gallery
    """
    if not k1 > k2 >= 1:
        raise EvaluationError(f"re-ranking needs k1 > k2 >= 1, got k1={k1} k2={k2}")
    if not 0.0 <= lambda_value <= 1.0:
        raise EvaluationError(f"re-ranking lambda must be in [0, 1], got {lambda_value}")
    q = np.asarray(q_embeddings, dtype=np.float64)
    g = np.asarray(g_embeddings, dtype=np.float64)
    if k1 >= g.shape[0]:
        raise EvaluationError(f"re-ranking k1={k1} must be smaller than the gallery ({g.shape[0]})")

    d_orig = pairwise_distance(q, g, metric)
    num_query = q.shape[0]
    pool = np.concatenate([q, g], axis=0)
    all_num = pool.shape[0]

    dist = pairwise_distance(pool, pool, metric) ** 2
    dist = dist / np.maximum(dist.max(axis=1, keepdims=True), 1e-12)
    initial_rank = np.argsort(dist, axis=1, kind='stable')

    half = int(np.around(k1 / 2.0))
    V = np.zeros((all_num, all_num), dtype=np.float64)
    for i in range(all_num):
        reciprocal = k_reciprocal_neighbors(initial_rank, i, k1)
        expansion = reciprocal
        for candidate in reciprocal:
            candidate_set = k_reciprocal_neighbors(initial_rank, candidate, half)
            if len(np.intersect1d(candidate_set, reciprocal)) > 2.0 / 3.0 * len(candidate_set):
                expansion = np.append(expansion, candidate_set)
        expansion = np.unique(expansion)
        weight = np.exp(-dist[i, expansion])
        V[i, expansion] = weight / np.sum(weight)

    if k2 > 1:
        V = V[initial_rank[:, :k2]].mean(axis=1)

    jaccard = np.zeros((num_query, g.shape[0]), dtype=np.float64)
    gallery_V = V[num_query:]
    for i in range(num_query):
        shared = np.minimum(V[i][None, :], gallery_V).sum(axis=1)
        jaccard[i] = 1.0 - shared / (2.0 - shared)
    jaccard = np.maximum(jaccard, 0.0)

    logger.debug("re-ranked %d queries against %d gallery items", num_query, g.shape[0])
    return lambda_value * d_orig + (1.0 - lambda_value) * jaccard
