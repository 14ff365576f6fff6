"""Proxy based losses: proxy-NCA, proxy triplet and normalized softmax.

Each training class owns one learnable proxy row in a ``ProxyBank``. The
losses compare every embedding with the proxies instead of with other
embeddings, so they work on any batch composition.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from core_math import (DifferentiableResult, cross_distance_backward,
                       cross_distances, embedding_view, hinge, hinge_gap,
                       normalize_backward, normalize_rows)
from errors import DomainError


@dataclass
class ProxyBank:
    """One proxy row per training class.

    :param proxies: C x D proxy matrix
    :type proxies: np.ndarray
    :param assignment: Class id to proxy row, fixed before training
    :type assignment: dict[int, int]
    :param trainable: Whether losses report a proxy gradient
    :type trainable: bool
    :param scale: Factor applied to normalized rows before distances
    :type scale: float
    :param normalize: Whether proxies and embeddings are L2-normalized
    :type normalize: bool
    """

    proxies: np.ndarray
    assignment: dict = field(default_factory=dict)
    trainable: bool = True
    scale: float = 3.0
    normalize: bool = True

    def __post_init__(self):
        self.proxies = np.array(self.proxies, dtype=np.float64)
        if self.proxies.ndim != 2 or self.proxies.shape[0] < 1:
            raise DomainError("proxies must be a non-empty C x D matrix")
        if not self.assignment:
            self.assignment = {c: c for c in range(self.proxies.shape[0])}
        rows = list(self.assignment.values())
        if len(set(rows)) != len(rows):
            raise DomainError("two classes share a proxy row")
        if min(rows) < 0 or max(rows) >= self.proxies.shape[0]:
            raise DomainError("proxy row out of range")
        if self.scale <= 0:
            raise DomainError("scale must be positive, got %r" % self.scale)

    @classmethod
    def random(cls, n_classes, dim, generator, **kwargs):
        """Get a bank of proxies drawn uniformly on the unit sphere.

        :param generator: Source of randomness
        :type generator: np.random.Generator
        """
        proxies = generator.standard_normal((n_classes, dim))
        proxies /= np.linalg.norm(proxies, axis=1, keepdims=True)
        return cls(proxies, {c: c for c in range(n_classes)}, **kwargs)

    @classmethod
    def from_temperature(cls, proxies, temperature, **kwargs):
        """Get a bank whose scale matches a softmax temperature.

        Dividing squared distances by ``temperature`` is the same as
        scaling both sides by ``1 / sqrt(temperature)``.
        """
        if temperature <= 0:
            raise DomainError("temperature must be positive, got %r"
                              % temperature)
        return cls(proxies, scale=float(np.sqrt(1.0 / temperature)),
                   **kwargs)

    @property
    def n_proxies(self):
        return self.proxies.shape[0]

    def rows_for(self, labels):
        """Get the proxy row of every label.

        :raise DomainError: A label has no proxy
        """
        try:
            return np.array([self.assignment[int(y)] for y in labels],
                            dtype=np.int64)
        except KeyError as e:
            raise DomainError("class %s has no assigned proxy"
                              % e.args[0]) from None


def _proxy_view(batch, bank):
    x, back_x = embedding_view(batch, bank.normalize)
    if bank.normalize:
        unit, norms = normalize_rows(bank.proxies)
        return x, back_x, unit, \
            lambda grad: normalize_backward(unit, norms, grad)
    return x, back_x, bank.proxies, lambda grad: grad


def _result(bank, value, grad_x, grad_p, gap=np.inf):
    grad_params = {"proxies": grad_p} if bank.trainable else {}
    return DifferentiableResult(float(value), grad_x, grad_params, gap)


def _scaled_distances(batch, bank):
    x, back_x, p, back_p = _proxy_view(batch, bank)
    u, v = bank.scale * x, bank.scale * p
    dist = cross_distances(u, v, "squared-euclidean")

    def backward(grad_dist):
        grad_u, grad_v = cross_distance_backward(u, v, dist, grad_dist,
                                                 "squared-euclidean")
        return back_x(bank.scale * grad_u), back_p(bank.scale * grad_v)

    return dist, backward


def proxy_nca_loss(batch, bank, include_positive=False):
    """Get the proxy-NCA loss.

    Per anchor ``d(x, p(y)) + log sum_n exp(-d(x, p(n)))`` where ``n`` runs
    over the proxies of the other classes, or over every proxy when
    ``include_positive`` is set. Distances are squared euclidean between
    the scaled rows. The default form is not bounded below.

    :param batch: Embeddings
    :type batch: core_math.EmbeddingBatch
    :param bank: Proxies
    :type bank: ProxyBank
    :param include_positive: Keep the positive proxy in the denominator
    :type include_positive: bool
    :rtype: core_math.DifferentiableResult
    :raise DomainError: Unassigned label or single-row bank
    """
    if bank.n_proxies < 2 and not include_positive:
        raise DomainError("proxy-NCA needs at least one negative proxy")
    rows = bank.rows_for(batch.labels)
    dist, backward = _scaled_distances(batch, bank)
    n = batch.size
    anchor = np.arange(n)

    logits = -dist
    if not include_positive:
        logits[anchor, rows] = -np.inf
    lse = logsumexp(logits, axis=1)
    value = np.mean(dist[anchor, rows] + lse)

    grad_dist = -np.exp(logits - lse[:, None])
    grad_dist[anchor, rows] += 1.0
    grad_x, grad_p = backward(grad_dist / n)
    return _result(bank, value, grad_x, grad_p)


def proxy_triplet_loss(batch, bank, margin=1.0):
    """Get the triplet hinge with proxies in place of the positive and
    negative samples, averaged over anchors and negative proxies.

    :param batch: Embeddings
    :type batch: core_math.EmbeddingBatch
    :param bank: Proxies
    :type bank: ProxyBank
    :param margin: Margin M
    :type margin: float
    :rtype: core_math.DifferentiableResult
    """
    if bank.n_proxies < 2:
        raise DomainError("proxy triplet loss needs a negative proxy")
    if margin <= 0:
        raise DomainError("margin must be positive, got %r" % margin)
    rows = bank.rows_for(batch.labels)
    dist, backward = _scaled_distances(batch, bank)
    n = batch.size
    anchor = np.arange(n)

    negative = np.ones_like(dist, dtype=bool)
    negative[anchor, rows] = False
    args = dist[anchor, rows][:, None] - dist + margin
    count = negative.sum()
    value = hinge(args)[negative].sum() / count

    weights = ((args > 0.0) & negative) / count
    grad_dist = -weights
    grad_dist[anchor, rows] += weights.sum(axis=1)
    grad_x, grad_p = backward(grad_dist)
    return _result(bank, value, grad_x, grad_p, hinge_gap(args[negative]))


def proxy_softmax_loss(batch, bank, temperature=0.1):
    """Get the normalized softmax loss over all proxies.

    Logits are ``x^T p / temperature`` on normalized rows and the softmax
    denominator includes the positive proxy, so a single-class bank gives
    a loss of 0.

    :param batch: Embeddings
    :type batch: core_math.EmbeddingBatch
    :param bank: Proxies
    :type bank: ProxyBank
    :param temperature: Softmax temperature
    :type temperature: float
    :rtype: core_math.DifferentiableResult
    """
    if temperature <= 0:
        raise DomainError("temperature must be positive, got %r"
                          % temperature)
    rows = bank.rows_for(batch.labels)
    x, back_x, p, back_p = _proxy_view(batch, bank)
    n = batch.size
    anchor = np.arange(n)

    logits = x @ p.T / temperature
    value = np.mean(logsumexp(logits, axis=1) - logits[anchor, rows])
    grad_logits = softmax(logits, axis=1)
    grad_logits[anchor, rows] -= 1.0
    grad_logits /= n * temperature
    return _result(bank, value, back_x(grad_logits @ p),
                   back_p(grad_logits.T @ x))
