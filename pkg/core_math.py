"""Numerical primitives shared by losses, samplers and evaluation.

Everything here works in double precision and keeps no state between
calls, so any function may be called from several threads at once.

Entry points are ``pairwise_distances``, ``l2_normalize`` and
``grad_check``. The ``*_backward`` helpers propagate a gradient taken
w.r.t. a distance matrix (or normalized rows) back to the embeddings.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from definitions import METRICS
from errors import DomainError, GradCheckFailure

logger = logging.getLogger(__name__)

# Rows flagged as normalized must have a norm this close to 1
NORM_TOLERANCE = 1e-6
# Gradient checks are skipped this close to a hinge kink
KINK_TOLERANCE = 1e-3
# Gradients below this, relative to the loss, are compared absolutely
GRAD_FLOOR = 1e-5
# Denominator floor of the plain relative error
PLAIN_FLOOR = 1e-8


@dataclass(frozen=True)
class EmbeddingBatch:
    """N embedding vectors with integer class labels.

    :param vectors: N x D matrix of embedding coordinates
    :type vectors: np.ndarray
    :param labels: Length N vector of class ids
    :type labels: np.ndarray
    :param normalized: Whether every row is L2-unit
    :type normalized: bool
    """

    vectors: np.ndarray
    labels: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        labels = np.array(self.labels).astype(np.int64).reshape(-1)
        if vectors.ndim != 2:
            raise DomainError("vectors must be a 2-d matrix, got %s dims"
                              % vectors.ndim)
        if vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise DomainError("batch needs N >= 1 and D >= 1, got %s"
                              % (vectors.shape,))
        if labels.shape[0] != vectors.shape[0]:
            raise DomainError("%s labels for %s vectors"
                              % (labels.shape[0], vectors.shape[0]))
        if self.normalized:
            norms = np.linalg.norm(vectors, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)
            if bad.size:
                raise DomainError("row %s flagged normalized has norm %r"
                                  % (bad[0], norms[bad[0]]))
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


@dataclass(frozen=True)
class DistanceMatrix:
    """Pairwise distances of a batch under ``metric``."""

    values: np.ndarray
    metric: str


@dataclass
class DifferentiableResult:
    """Loss value and its exact partial derivatives.

    ``min_hinge_gap`` is the smallest absolute argument of any hinge (or
    discrete selection) that the value depends on; ``inf`` for smooth
    losses. Gradient checks use it to stay away from kinks.
    """

    value: float
    grad_embeddings: np.ndarray
    grad_params: dict = field(default_factory=dict)
    min_hinge_gap: float = np.inf

    def __add__(self, other):
        params = dict(self.grad_params)
        for k, v in other.grad_params.items():
            params[k] = params[k] + v if k in params else v
        return DifferentiableResult(
            self.value + other.value,
            self.grad_embeddings + other.grad_embeddings,
            params,
            min(self.min_hinge_gap, other.min_hinge_gap))

    def scaled(self, factor):
        return DifferentiableResult(
            self.value * factor, self.grad_embeddings * factor,
            {k: v * factor for k, v in self.grad_params.items()},
            self.min_hinge_gap)


@dataclass
class GradCheckReport:
    """Outcome of ``grad_check``.

    ``max_rel_error`` decides ``passed``. ``max_plain_error`` is the same
    maximum with the denominator floored at ``PLAIN_FLOOR`` only; it is
    reported alongside and exceeds ``max_rel_error`` mostly at
    coordinates whose true gradient is zero.
    """

    max_rel_error: float
    passed: bool
    worst: tuple = None
    n_checked: int = 0
    skipped: bool = False
    max_plain_error: float = 0.0


def check_metric(metric):
    if metric not in METRICS:
        raise DomainError("unknown metric %r, expected one of %s"
                          % (metric, ", ".join(METRICS)))


def row_norms(x):
    """Get L2 norms of the rows of ``x``, refusing zero rows.

    :param x: Matrix
    :type x: np.ndarray
    :return: Row norms
    :rtype: np.ndarray
    :raise DomainError: A row has zero norm
    """
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DomainError("row %s has zero norm" % zero[0])
    return norms


def normalize_rows(x):
    """Divide every row by its L2 norm.

    :return: Normalized rows and the norms they were divided by
    :rtype: tuple[np.ndarray, np.ndarray]
    """
    norms = row_norms(x)
    return x / norms[:, None], norms


def normalize_backward(unit, norms, grad_unit):
    """Chain a gradient w.r.t. normalized rows back to the raw rows."""
    radial = np.sum(unit * grad_unit, axis=1, keepdims=True)
    return (grad_unit - unit * radial) / norms[:, None]


def embedding_view(batch, normalize):
    """Get the rows a loss works on and the chain back to raw rows.

    :param batch: Raw embeddings
    :type batch: EmbeddingBatch
    :param normalize: Whether the loss works on L2-normalized rows
    :type normalize: bool
    :return: Working rows and a function mapping a gradient w.r.t. them
        to a gradient w.r.t. ``batch.vectors``
    :rtype: tuple[np.ndarray, callable]
    """
    if not normalize:
        return batch.vectors, lambda grad: grad
    unit, norms = normalize_rows(batch.vectors)
    return unit, lambda grad: normalize_backward(unit, norms, grad)


def cross_distances(a, b, metric):
    """Get the |a| x |b| matrix of distances between rows of a and b.

    :param a: Left rows
    :type a: np.ndarray
    :param b: Right rows
    :type b: np.ndarray
    :param metric: One of ``definitions.METRICS``
    :type metric: str
    :rtype: np.ndarray
    """
    check_metric(metric)
    if metric == "squared-euclidean":
        return cdist(a, b, "sqeuclidean")
    if metric == "euclidean":
        return cdist(a, b, "euclidean")
    if metric == "cosine-distance":
        a_unit, _ = normalize_rows(a)
        b_unit, _ = normalize_rows(b)
        return 1.0 - a_unit @ b_unit.T
    return -(a @ b.T)


def cross_distance_backward(a, b, values, grad_values, metric):
    """Chain dL/d(distances) back to both sets of rows.

    :param values: ``cross_distances(a, b, metric)``
    :type values: np.ndarray
    :param grad_values: dL/d(values), same shape as ``values``
    :type grad_values: np.ndarray
    :return: dL/da and dL/db
    :rtype: tuple[np.ndarray, np.ndarray]
    """
    check_metric(metric)
    g = grad_values
    if metric == "euclidean":
        # d = sqrt(s): dd/ds = 1 / (2d), subgradient 0 where d == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(values > 0.0, g / (2.0 * values), 0.0)
        metric = "squared-euclidean"
    if metric == "squared-euclidean":
        grad_a = 2.0 * (g.sum(axis=1)[:, None] * a - g @ b)
        grad_b = 2.0 * (g.sum(axis=0)[:, None] * b - g.T @ a)
        return grad_a, grad_b
    if metric == "cosine-distance":
        a_unit, a_norms = normalize_rows(a)
        b_unit, b_norms = normalize_rows(b)
        grad_a = normalize_backward(a_unit, a_norms, -(g @ b_unit))
        grad_b = normalize_backward(b_unit, b_norms, -(g.T @ a_unit))
        return grad_a, grad_b
    return -(g @ b), -(g.T @ a)


def distance_values(x, metric):
    """Get the symmetric N x N distance matrix of the rows of ``x``."""
    check_metric(metric)
    if metric in ("squared-euclidean", "euclidean"):
        return cross_distances(x, x, metric)
    if metric == "cosine-distance":
        unit, _ = normalize_rows(x)
        gram = unit @ unit.T
        ret = 1.0 - 0.5 * (gram + gram.T)
        np.fill_diagonal(ret, 0.0)
        return ret
    gram = x @ x.T
    return -0.5 * (gram + gram.T)


def distance_backward(x, values, grad_values, metric):
    """Chain dL/d(distance_values(x)) back to the rows of ``x``."""
    grad_a, grad_b = cross_distance_backward(x, x, values, grad_values,
                                             metric)
    return grad_a + grad_b


def pairwise_distances(batch, metric="squared-euclidean"):
    """Get the distance matrix of a batch.

    :param batch: Embeddings
    :type batch: EmbeddingBatch
    :param metric: squared-euclidean, euclidean, cosine-distance or
        negative-dot
    :type metric: str
    :rtype: DistanceMatrix
    :raise DomainError: Zero-norm row under cosine-distance
    """
    return DistanceMatrix(distance_values(batch.vectors, metric), metric)


def l2_normalize(batch):
    """Scale every row of ``batch`` to unit L2 norm.

    :type batch: EmbeddingBatch
    :rtype: EmbeddingBatch
    :raise DomainError: A row has zero norm
    """
    unit, _ = normalize_rows(batch.vectors)
    return EmbeddingBatch(unit, batch.labels, normalized=True)


def hinge(x):
    return np.maximum(x, 0.0)


def hinge_gap(arguments):
    """Smallest distance of any hinge argument to the kink at 0."""
    arguments = np.asarray(arguments, dtype=np.float64)
    if arguments.size == 0:
        return np.inf
    return float(np.min(np.abs(arguments)))


def _relative_error(analytic, numeric, floor):
    return abs(analytic - numeric) / max(floor, abs(analytic) + abs(numeric))


def grad_check(loss_evaluator, batch, step=1e-5, tolerance=1e-4,
               params=None, kink_tolerance=KINK_TOLERANCE):
    """Compare analytic gradients against central finite differences.

    ``loss_evaluator(batch, params)`` must return a
    ``DifferentiableResult`` whose ``grad_params`` keys are the keys of
    ``params``. One coordinate is perturbed at a time, in the embeddings
    first and then in every parameter array. The relative error divides by
    ``|analytic| + |numeric|``, floored at ``GRAD_FLOOR`` times the loss
    magnitude so that vanishing gradients are not judged on roundoff.
    The error with the plain ``max(1e-8, |analytic| + |numeric|)``
    denominator is reported as well.

    :param loss_evaluator: Loss bound to fixed hyperparameters
    :type loss_evaluator: callable
    :param batch: Point to check at
    :type batch: EmbeddingBatch
    :param step: Finite difference step
    :type step: float
    :param tolerance: Largest accepted relative error
    :type tolerance: float
    :param params: Trainable parameters, name to array
    :type params: dict | None
    :param kink_tolerance: Points whose ``min_hinge_gap`` is below this
        are skipped, since the loss is not differentiable there.
    :type kink_tolerance: float
    :rtype: GradCheckReport
    :raise GradCheckFailure: Non-finite loss at a perturbed point
    """
    if step <= 0:
        raise DomainError("step must be positive, got %r" % step)
    params = {k: np.array(v, dtype=np.float64)
              for k, v in (params or {}).items()}
    base = loss_evaluator(batch, params)
    if not np.isfinite(base.value):
        raise GradCheckFailure(("embeddings", -1), base.value)
    if set(base.grad_params) != set(params):
        raise DomainError("gradient keys %s do not match parameters %s"
                          % (sorted(base.grad_params), sorted(params)))
    if base.min_hinge_gap < kink_tolerance:
        logger.debug("Skipping gradient check %s from a kink",
                     base.min_hinge_gap)
        return GradCheckReport(0.0, True, None, 0, skipped=True)

    def evaluate(name, vectors, perturbed_params, index):
        perturbed = EmbeddingBatch(vectors, batch.labels)
        value = loss_evaluator(perturbed, perturbed_params).value
        if not np.isfinite(value):
            raise GradCheckFailure((name, index), value)
        return value

    floor = GRAD_FLOOR * max(1.0, abs(base.value))
    worst = None
    max_err = 0.0
    max_plain = 0.0
    n_checked = 0
    targets = [("embeddings", batch.vectors, base.grad_embeddings)]
    targets += [(k, params[k], base.grad_params[k]) for k in sorted(params)]
    for name, array, analytic in targets:
        flat_analytic = np.asarray(analytic).reshape(-1)
        for index in range(array.size):
            values = []
            for sign in (1.0, -1.0):
                moved = array.copy().reshape(-1)
                moved[index] += sign * step
                moved = moved.reshape(array.shape)
                if name == "embeddings":
                    values.append(evaluate(name, moved, params, index))
                else:
                    moved_params = dict(params)
                    moved_params[name] = moved
                    values.append(evaluate(name, batch.vectors,
                                           moved_params, index))
            numeric = (values[0] - values[1]) / (2.0 * step)
            err = _relative_error(flat_analytic[index], numeric, floor)
            max_plain = max(max_plain, _relative_error(
                flat_analytic[index], numeric, PLAIN_FLOOR))
            n_checked += 1
            if err > max_err:
                max_err = err
                worst = (name, index)
    ret = GradCheckReport(max_err, max_err <= tolerance, worst, n_checked,
                          max_plain_error=max_plain)
    return ret
