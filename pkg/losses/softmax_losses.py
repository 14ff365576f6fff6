"""Softmax cross-entropy style losses: n-pairs, angular and prototypical.

n-pairs and angular losses need a batch made of exactly two rows per class
together with the ``(anchor, positive)`` layout recorded by the n-pairs
composer. The prototypical loss needs the episode layout recorded by the
episodic composer.
"""

import numpy as np
from scipy.special import logsumexp, softmax

from core_math import (DifferentiableResult, cross_distance_backward,
                       cross_distances, embedding_view)
from errors import DomainError
from losses.index_sets import AngularParams


def npairs_layout(batch, plan):
    """Get the checked ``(anchor, positive)`` rows of an n-pairs plan.

    :param batch: Embeddings the plan was drawn for
    :type batch: core_math.EmbeddingBatch
    :param plan: Plan of kind ``npairs``
    :type plan: batch_sampler.BatchPlan
    :return: Anchor rows and positive rows, one entry per class
    :rtype: tuple[np.ndarray, np.ndarray]
    :raise DomainError: Batch not in 2-per-class shape
    """
    if plan.kind != "npairs":
        raise DomainError("expected an npairs plan, got %r" % plan.kind)
    layout = np.asarray(plan.npairs_layout, dtype=np.int64).reshape(-1, 2)
    labels = batch.labels
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2 or np.any(counts != 2):
        raise DomainError("batch is not 2 samples per class over >= 2 "
                          "classes")
    if layout.shape[0] != classes.size:
        raise DomainError("layout has %s pairs for %s classes"
                          % (layout.shape[0], classes.size))
    if layout.min() < 0 or layout.max() >= batch.size:
        raise DomainError("layout index out of range for batch of %s"
                          % batch.size)
    anchors, positives = layout[:, 0], layout[:, 1]
    if np.any(anchors == positives) \
            or np.any(labels[anchors] != labels[positives]) \
            or np.unique(labels[anchors]).size != classes.size:
        raise DomainError("layout pairs do not cover every class once")
    return anchors, positives


def _npairs_term(x, anchors, positives):
    # Row r: log(1 + sum_n exp(s(a_r, p_n) - s(a_r, p_r))) ==
    # logsumexp_n s(a_r, p_n) - s(a_r, p_r), the n == r entry being the 1
    sim = x[anchors] @ x[positives].T
    n = sim.shape[0]
    lse = logsumexp(sim, axis=1)
    value = float(np.mean(lse - np.diag(sim)))
    grad_sim = (softmax(sim, axis=1) - np.eye(n)) / n
    grad = np.zeros_like(x)
    np.add.at(grad, anchors, grad_sim @ x[positives])
    np.add.at(grad, positives, grad_sim.T @ x[anchors])
    return value, grad


def npairs_loss(batch, plan, l2_reg=0.002, reverse_pairs=False,
                normalize=False):
    """Get the multi-class n-pairs loss.

    Each anchor is contrasted with its positive against the positives of
    every other class in the batch, using dot product similarity. An L2
    penalty ``l2_reg * mean ||x||^2`` on the raw embeddings is added.

    :param batch: Embeddings, exactly two per class
    :type batch: core_math.EmbeddingBatch
    :param plan: Plan of kind ``npairs``
    :type plan: batch_sampler.BatchPlan
    :param l2_reg: Weight of the embedding norm penalty
    :type l2_reg: float
    :param reverse_pairs: Average with the loss of the swapped pairs
    :type reverse_pairs: bool
    :param normalize: Work on L2-normalized embeddings
    :type normalize: bool
    :rtype: core_math.DifferentiableResult
    :raise DomainError: Batch not in 2-per-class shape
    """
    if l2_reg < 0:
        raise DomainError("l2_reg must be non-negative, got %r" % l2_reg)
    anchors, positives = npairs_layout(batch, plan)
    x, backward = embedding_view(batch, normalize)

    value, grad = _npairs_term(x, anchors, positives)
    if reverse_pairs:
        rev_value, rev_grad = _npairs_term(x, positives, anchors)
        value = 0.5 * (value + rev_value)
        grad = 0.5 * (grad + rev_grad)
    grad = backward(grad)

    raw = batch.vectors
    value += l2_reg * float(np.mean(np.sum(raw * raw, axis=1)))
    grad = grad + l2_reg * 2.0 * raw / batch.size
    return DifferentiableResult(value, grad)


def angular_loss(batch, plan, params=None, combine_npairs=False,
                 npairs_weight=2.0, normalize=True):
    """Get the angular loss, optionally added to the n-pairs loss.

    Works on the n-pairs layout. For anchor ``a``, its positive ``p`` and
    every other class positive ``n``::

        f = 4 tan^2(alpha) (x_a + x_p)^T x_n - 2 (1 + tan^2(alpha)) x_a^T x_p

    and the per-anchor loss is ``log(1 + sum_n exp(f))``.

    With ``combine_npairs`` the result is
    ``npairs + npairs_weight * angular``, where the n-pairs term runs on the
    same normalized rows without L2 penalty.

    :param batch: Embeddings, exactly two per class
    :type batch: core_math.EmbeddingBatch
    :param plan: Plan of kind ``npairs``
    :type plan: batch_sampler.BatchPlan
    :param params: Angle bound
    :type params: losses.index_sets.AngularParams
    :rtype: core_math.DifferentiableResult
    """
    params = params or AngularParams()
    anchors, positives = npairs_layout(batch, plan)
    x, backward = embedding_view(batch, normalize)
    t_sq = params.tan_sq
    n = anchors.size

    xa, xp = x[anchors], x[positives]
    pair_sum = xa + xp
    f = 4.0 * t_sq * (pair_sum @ xp.T) \
        - 2.0 * (1.0 + t_sq) * np.sum(xa * xp, axis=1)[:, None]
    # The diagonal entry stands for the 1 inside the log
    z = f.copy()
    np.fill_diagonal(z, 0.0)
    value = float(np.mean(logsumexp(z, axis=1)))

    w = softmax(z, axis=1) / n
    np.fill_diagonal(w, 0.0)
    row_w = w.sum(axis=1)[:, None]
    pulled = w @ xp
    grad = np.zeros_like(x)
    np.add.at(grad, anchors, 4.0 * t_sq * pulled
              - 2.0 * (1.0 + t_sq) * row_w * xp)
    np.add.at(grad, positives, 4.0 * t_sq * pulled
              - 2.0 * (1.0 + t_sq) * row_w * xa)
    np.add.at(grad, positives, 4.0 * t_sq * (w.T @ pair_sum))

    ret = DifferentiableResult(value, backward(grad))
    if combine_npairs:
        np_value, np_grad = _npairs_term(x, anchors, positives)
        ret = DifferentiableResult(np_value, backward(np_grad)) \
            + ret.scaled(npairs_weight)
    return ret


def _check_episode(batch, episode):
    if not episode:
        raise DomainError("empty episode")
    n_query = 0
    for group in episode:
        if len(group.support) == 0:
            raise DomainError("class %s has no support samples"
                              % group.label)
        rows = list(group.support) + list(group.query)
        if min(rows) < 0 or max(rows) >= batch.size:
            raise DomainError("episode index out of range for batch of %s"
                              % batch.size)
        if np.any(batch.labels[rows] != group.label):
            raise DomainError("episode rows of class %s carry other labels"
                              % group.label)
        n_query += len(group.query)
    if n_query == 0:
        raise DomainError("episode has no query samples")


def _episode_term(x, episode, metric):
    protos = np.stack([x[list(g.support)].mean(axis=0) for g in episode])
    query_rows = np.array([q for g in episode for q in g.query],
                          dtype=np.int64)
    targets = np.array([k for k, g in enumerate(episode) for _ in g.query],
                       dtype=np.int64)
    queries = x[query_rows]
    n_query = query_rows.size

    dist = cross_distances(queries, protos, metric)
    lse = logsumexp(-dist, axis=1)
    value = float(np.mean(dist[np.arange(n_query), targets] + lse))

    onehot = np.zeros_like(dist)
    onehot[np.arange(n_query), targets] = 1.0
    grad_dist = (onehot - softmax(-dist, axis=1)) / n_query
    grad_q, grad_protos = cross_distance_backward(queries, protos, dist,
                                                  grad_dist, metric)
    grad = np.zeros_like(x)
    np.add.at(grad, query_rows, grad_q)
    for k, group in enumerate(episode):
        support = np.asarray(group.support, dtype=np.int64)
        np.add.at(grad, support, grad_protos[k] / support.size)
    return value, grad


def prototypical_loss(batch, plan, metric="squared-euclidean",
                      normalize=False):
    """Get the prototypical loss averaged over the episodes of a plan.

    Prototypes are the mean support embedding of each class of an
    episode; queries are classified by a softmax over negative distances
    to the prototypes. Gradients reach the support rows through the
    prototype means.

    :param batch: Embeddings
    :type batch: core_math.EmbeddingBatch
    :param plan: Plan of kind ``episode``
    :type plan: batch_sampler.BatchPlan
    :rtype: core_math.DifferentiableResult
    :raise DomainError: A class has zero support samples
    """
    if plan.kind != "episode":
        raise DomainError("expected an episode plan, got %r" % plan.kind)
    if not plan.episode_layout:
        raise DomainError("plan has no episodes")
    x, backward = embedding_view(batch, normalize)
    total = 0.0
    grad = np.zeros_like(x)
    for episode in plan.episode_layout:
        _check_episode(batch, episode)
        value, episode_grad = _episode_term(x, episode, metric)
        total += value
        grad += episode_grad
    n_episodes = len(plan.episode_layout)
    return DifferentiableResult(total / n_episodes,
                                backward(grad / n_episodes))
