"""Distance-based losses over pairs and triplets within a batch.

Triplet, lifted structured, margin and ranked list losses. Each loss
works on a distance matrix of the (optionally normalized) batch and
collects dL/d(distances) in a matrix that ``core_math.distance_backward``
chains back to the embeddings.
"""

import numpy as np
from scipy.special import logsumexp

from core_math import (DifferentiableResult, distance_backward,
                       distance_values, embedding_view, hinge, hinge_gap)
from errors import DomainError


def triplet_loss(batch, triplets, margin=0.2, metric="squared-euclidean",
                 normalize=True):
    """Get the mean hinge ``[d(a, p) - d(a, n) + M]_+`` over triplets.

    :param batch: Embeddings
    :type batch: core_math.EmbeddingBatch
    :param triplets: Triplets to average over
    :type triplets: losses.index_sets.TripletIndexSet
    :param margin: Margin M
    :type margin: float
    :param metric: Distance used for d
    :type metric: str
    :param normalize: Work on L2-normalized embeddings
    :type normalize: bool
    :rtype: core_math.DifferentiableResult
    :raise DomainError: Empty triplet set or non-positive margin
    """
    index = triplets.as_array()
    if index.shape[0] == 0:
        raise DomainError("triplet loss needs at least one triplet")
    if margin <= 0:
        raise DomainError("margin must be positive, got %r" % margin)
    triplets.validate(batch.labels)

    x, backward = embedding_view(batch, normalize)
    dist = distance_values(x, metric)
    a, p, n = index.T
    args = dist[a, p] - dist[a, n] + margin

    weights = (args > 0.0) / index.shape[0]
    grad_dist = np.zeros_like(dist)
    np.add.at(grad_dist, (a, p), weights)
    np.add.at(grad_dist, (a, n), -weights)
    grad = backward(distance_backward(x, dist, grad_dist, metric))
    ret = DifferentiableResult(float(np.mean(hinge(args))), grad, {},
                               hinge_gap(args))
    return ret


def _negative_adjacency(pairs, n):
    ret = np.zeros((n, n), dtype=bool)
    for i, j in pairs.negatives:
        ret[i, j] = True
        ret[j, i] = True
    return ret


def lifted_struct_loss(batch, pairs, margin=1.0, metric="euclidean",
                       normalize=False):
    """Get the lifted structured loss.

    Every positive pair ``(i, j)`` is compared against all negatives of
    both ``i`` and ``j`` through a log-sum-exp, and the squared hinge of
    the result is averaged with the ``1 / (2|P|)`` normalizer.

    :param batch: Embeddings
    :type batch: core_math.EmbeddingBatch
    :param pairs: Positive and negative pairs
    :type pairs: losses.index_sets.PairIndexSet
    :param margin: Margin M
    :type margin: float
    :rtype: core_math.DifferentiableResult
    :raise DomainError: A positive pair has no negative on either side
    """
    if not pairs.positives:
        raise DomainError("lifted structured loss needs a positive pair")
    pairs.validate(batch.labels)

    x, backward = embedding_view(batch, normalize)
    dist = distance_values(x, metric)
    negatives = _negative_adjacency(pairs, batch.size)
    n_pos = len(pairs.positives)

    grad_dist = np.zeros_like(dist)
    total = 0.0
    for i, j in pairs.positives:
        neg_i = np.flatnonzero(negatives[i])
        neg_j = np.flatnonzero(negatives[j])
        if neg_i.size + neg_j.size == 0:
            raise DomainError("positive pair (%s, %s) has no negatives"
                              % (i, j))
        z = np.concatenate([margin - dist[i, neg_i], margin - dist[j, neg_j]])
        lse = logsumexp(z)
        j_value = lse + dist[i, j]
        if j_value <= 0.0:
            continue
        total += j_value ** 2
        coef = j_value / n_pos
        soft = np.exp(z - lse)
        grad_dist[i, j] += coef
        grad_dist[i, neg_i] -= coef * soft[:neg_i.size]
        grad_dist[j, neg_j] -= coef * soft[neg_i.size:]

    grad = backward(distance_backward(x, dist, grad_dist, metric))
    return DifferentiableResult(total / (2.0 * n_pos), grad)


def margin_loss(batch, pairs, params, metric="euclidean", normalize=True):
    """Get the margin loss with a learnable per-class margin beta.

    Positive pairs pay ``[alpha + d - beta_y]_+`` and negative pairs
    ``[alpha - d + beta_y]_+`` where ``y`` is the class of the first
    index of the pair.

    :param batch: Embeddings
    :type batch: core_math.EmbeddingBatch
    :param pairs: Pairs, usually from distance weighted sampling
    :type pairs: losses.index_sets.PairIndexSet
    :param params: beta vector, alpha and whether beta is trainable
    :type params: losses.index_sets.MarginLossParams
    :rtype: core_math.DifferentiableResult
    :raise DomainError: A class has no beta entry, or no pairs given
    """
    labels = batch.labels
    beta = params.beta
    if labels.min() < 0 or labels.max() >= beta.shape[0]:
        bad = labels[(labels < 0) | (labels >= beta.shape[0])][0]
        raise DomainError("class %s has no beta entry" % bad)
    pos = np.asarray(pairs.positives, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(pairs.negatives, dtype=np.int64).reshape(-1, 2)
    n_pairs = pos.shape[0] + neg.shape[0]
    if n_pairs == 0:
        raise DomainError("margin loss needs at least one pair")
    pairs.validate(labels)

    x, backward = embedding_view(batch, normalize)
    dist = distance_values(x, metric)
    pos_args = params.alpha + dist[pos[:, 0], pos[:, 1]] \
        - beta[labels[pos[:, 0]]]
    neg_args = params.alpha - dist[neg[:, 0], neg[:, 1]] \
        + beta[labels[neg[:, 0]]]
    value = (hinge(pos_args).sum() + hinge(neg_args).sum()) / n_pairs

    pos_w = (pos_args > 0.0) / n_pairs
    neg_w = (neg_args > 0.0) / n_pairs
    grad_dist = np.zeros_like(dist)
    np.add.at(grad_dist, (pos[:, 0], pos[:, 1]), pos_w)
    np.add.at(grad_dist, (neg[:, 0], neg[:, 1]), -neg_w)
    grad = backward(distance_backward(x, dist, grad_dist, metric))

    grad_params = {}
    if params.trainable_beta:
        grad_beta = np.zeros_like(beta)
        np.add.at(grad_beta, labels[pos[:, 0]], -pos_w)
        np.add.at(grad_beta, labels[neg[:, 0]], neg_w)
        grad_params["beta"] = grad_beta
    gap = hinge_gap(np.concatenate([pos_args, neg_args]))
    return DifferentiableResult(float(value), grad, grad_params, gap)


def ranked_list_loss(batch, params, metric="euclidean", normalize=True):
    """Get the ranked list loss.

    For each anchor, non-trivial positives (outside radius ``alpha - m``)
    are averaged uniformly and non-trivial negatives (inside ``alpha``)
    with weights ``exp(T (alpha - d))``. The per-anchor loss is
    ``L_P + lambda L_N``, averaged over anchors that have a positive.

    :param batch: Embeddings
    :type batch: core_math.EmbeddingBatch
    :param params: alpha, m, lambda and temperature T
    :type params: losses.index_sets.RankedListParams
    :rtype: core_math.DifferentiableResult
    :raise DomainError: No anchor has a same-class partner
    """
    labels = batch.labels
    x, backward = embedding_view(batch, normalize)
    dist = distance_values(x, metric)
    inner = params.alpha - params.m

    grad_dist = np.zeros_like(dist)
    total = 0.0
    n_anchors = 0
    hinge_args = []
    for a in range(batch.size):
        same = labels == labels[a]
        same[a] = False
        pos = np.flatnonzero(same)
        if pos.size == 0:
            continue
        neg = np.flatnonzero(labels != labels[a])
        n_anchors += 1

        pos_args = dist[a, pos] - inner
        neg_args = params.alpha - dist[a, neg]
        hinge_args += [pos_args, neg_args]

        active = pos_args > 0.0
        if active.any():
            total += pos_args[active].mean()
            grad_dist[a, pos[active]] += 1.0 / active.sum()

        active = neg_args > 0.0
        if active.any():
            ell = neg_args[active]
            z = params.temperature * ell
            w = np.exp(z - z.max())
            w /= w.sum()
            loss_n = float(np.sum(w * ell))
            total += params.lam * loss_n
            d_ell = w * (1.0 + params.temperature * (ell - loss_n))
            grad_dist[a, neg[active]] -= params.lam * d_ell

    if n_anchors == 0:
        raise DomainError("ranked list loss: no anchor has a positive")
    grad_dist /= n_anchors
    grad = backward(distance_backward(x, dist, grad_dist, metric))
    gap = hinge_gap(np.concatenate(hinge_args))
    return DifferentiableResult(total / n_anchors, grad, {}, gap)
