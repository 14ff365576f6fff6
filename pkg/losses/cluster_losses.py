"""Structured clustering loss built on facility location."""

import numpy as np

from clustering_eval import facility_terms, inference_search, oracle_terms
from core_math import (DifferentiableResult, distance_backward,
                       distance_values, embedding_view, hinge_gap)
from errors import DomainError
from losses.index_sets import StructClustParams


def _nearest_gaps(dist, facilities):
    if len(facilities) < 2:
        return []
    sub = np.sort(dist[:, facilities], axis=1)
    return list(sub[:, 1] - sub[:, 0])


def struct_clust_loss(batch, params=None, normalize=True):
    """Get the structured clustering loss.

    ``[max_S {F(X, S) + gamma (1 - NMI(g(S), Y))} - F~(X)]_+`` where the
    maximum runs over medoid sets of size k (the number of classes) and is
    found by ``params.inference``, and ``F~`` is the score of the best
    in-class medoids. The gradient flows through the distances used by
    ``F`` at the found set and by ``F~`` at the class medoids.

    :param batch: Embeddings
    :type batch: core_math.EmbeddingBatch
    :param params: gamma and the inference mode
    :type params: losses.index_sets.StructClustParams
    :rtype: core_math.DifferentiableResult
    :raise DomainError: Fewer than two classes
    :raise GuardError: Exhaustive inference on more than 12 points
    """
    params = params or StructClustParams()
    labels = batch.labels
    k = np.unique(labels).size
    if k < 2:
        raise DomainError("structured clustering loss needs >= 2 classes")

    x, backward = embedding_view(batch, normalize)
    dist = distance_values(x, "euclidean")
    chosen, best, search_gap = inference_search(dist, labels, params.gamma,
                                                k, params.inference)
    oracle, medoids, medoid_gaps = oracle_terms(dist, labels)
    arg = best - oracle

    gaps = [abs(arg), search_gap] + medoid_gaps \
        + _nearest_gaps(dist, chosen)
    grad_dist = np.zeros_like(dist)
    if arg > 0.0:
        _, nearest = facility_terms(dist, chosen)
        rows = np.arange(batch.size)
        np.add.at(grad_dist, (rows, np.asarray(chosen)[nearest]), -1.0)
        own = np.array([medoids[int(y)] for y in labels])
        np.add.at(grad_dist, (rows, own), 1.0)
    grad = backward(distance_backward(x, dist, grad_dist, "euclidean"))
    return DifferentiableResult(max(arg, 0.0), grad, {}, hinge_gap(gaps))
