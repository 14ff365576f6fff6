"""Retrieval and clustering quality measures, and facility location.

``recall_at_k`` and ``nmi`` implement the evaluation protocol: exact
nearest neighbor retrieval on the test set (which is both query and index
set) and the normalized mutual information between a clustering of the
embeddings and the classes.

The facility location helpers score a set of medoids ``S`` by
``F(X, S) = -sum_i min_{j in S} ||x_i - x_j||`` and search for the set that
maximizes ``F + gamma * (1 - NMI)``, the loss augmented inference used by
the structured clustering loss.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from core_math import distance_values
from definitions import RECALL_KS, RETRIEVAL_METRICS
from errors import DomainError, GuardError
from losses.index_sets import EXHAUSTIVE_MAX_POINTS, INFERENCE_MODES

logger = logging.getLogger(__name__)

# Queries handled per retrieval chunk
QUERY_CHUNK = 256
# Objective improvements below this do not count for swap hill climbing
SWAP_TOLERANCE = 1e-12


@dataclass(frozen=True)
class ClusterAssignment:
    """Cluster id of every point."""

    assignment: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "assignment",
                           np.asarray(self.assignment).reshape(-1))

    def canonical(self):
        """Get the same partition with ids ``0..k-1`` in order of first
        appearance."""
        _, first, inverse = np.unique(self.assignment, return_index=True,
                                      return_inverse=True)
        rank = np.argsort(np.argsort(first))
        return ClusterAssignment(rank[inverse])

    @property
    def n_clusters(self):
        return np.unique(self.assignment).size


@dataclass(frozen=True)
class FacilitySet:
    """Sorted distinct point indices used as medoids."""

    indices: tuple

    def __post_init__(self):
        indices = tuple(sorted({int(i) for i in self.indices}))
        if not indices:
            raise DomainError("a facility set needs at least one index")
        if len(indices) != len(tuple(self.indices)):
            raise DomainError("facility indices must be distinct")
        object.__setattr__(self, "indices", indices)

    def __len__(self):
        return len(self.indices)

    def check(self, n):
        if self.indices[0] < 0 or self.indices[-1] >= n:
            raise DomainError("facility index out of range for %s points" % n)


@dataclass
class EvalReport:
    """Recall@K and NMI of one evaluation.

    :param recall_at: K to recall in [0, 1]
    :type recall_at: dict[int, float]
    :param nmi: NMI of the k-means clustering against the classes
    :type nmi: float
    :param n_queries: Number of queries retrieved for
    :type n_queries: int
    :param metric: ``euclidean`` or ``hamming``
    :type metric: str
    :param step: Training step the report was taken at
    :type step: int
    """

    recall_at: dict
    nmi: float
    n_queries: int
    metric: str = "euclidean"
    step: int = 0

    def __post_init__(self):
        if self.metric not in RETRIEVAL_METRICS:
            raise DomainError("unknown retrieval metric %r" % self.metric)
        ks = sorted(self.recall_at)
        for lo, hi in zip(ks, ks[1:]):
            if self.recall_at[hi] < self.recall_at[lo]:
                raise DomainError("recall@%s=%r below recall@%s=%r"
                                  % (hi, self.recall_at[hi], lo,
                                     self.recall_at[lo]))

    def to_dict(self):
        return {
            "step": int(self.step),
            "recall_at": {str(k): float(v)
                          for k, v in sorted(self.recall_at.items())},
            "nmi": float(self.nmi),
            "metric": self.metric,
            "n_queries": int(self.n_queries),
        }

    @classmethod
    def from_dict(cls, d):
        """Inverse of ``to_dict``."""
        return cls({int(k): v for k, v in d["recall_at"].items()}, d["nmi"],
                   d["n_queries"], d["metric"], d["step"])


def _retrieval_distances(queries, index, metric):
    if metric == "euclidean":
        # Same order as euclidean, without the square root
        return cdist(queries, index, "sqeuclidean")
    return cdist(queries, index, "hamming") * index.shape[1]


def _chunk_hits(index_set, queries, labels, rows, kmax, metric,
                exclude_self):
    dist = _retrieval_distances(queries[rows], index_set.vectors, metric)
    if exclude_self:
        dist[np.arange(rows.size), rows] = np.inf
    order = np.argsort(dist, axis=1, kind="stable")[:, :kmax]
    match = index_set.labels[order] == labels[rows][:, None]
    # first_hit[q] = rank of the first same-label neighbor, kmax if none
    first_hit = np.where(match.any(axis=1), match.argmax(axis=1), kmax)
    return first_hit


def recall_at_k(index_set, query_set=None, ks=RECALL_KS, metric="euclidean",
                workers=1):
    """Get Recall@K by exact nearest neighbor retrieval.

    A query scores 1 for K when one of its K nearest index rows shares its
    label. When ``query_set`` is omitted (or is ``index_set`` itself) the
    index doubles as the query set and every query skips itself. Ties in
    distance go to the lower index row.

    :param index_set: Rows to retrieve from
    :type index_set: core_math.EmbeddingBatch
    :param query_set: Rows to retrieve for, defaults to ``index_set``
    :type query_set: core_math.EmbeddingBatch | None
    :param ks: Cut-offs
    :type ks: tuple[int]
    :param metric: ``euclidean`` or ``hamming``
    :type metric: str
    :param workers: Threads the queries are split across
    :type workers: int
    :return: K to recall
    :rtype: dict[int, float]
    :raise DomainError: A K is not below the index size
    """
    if metric not in RETRIEVAL_METRICS:
        raise DomainError("unknown retrieval metric %r" % metric)
    ks = sorted(int(k) for k in ks)
    if not ks or ks[0] < 1:
        raise DomainError("cut-offs must be positive integers")
    exclude_self = query_set is None or query_set is index_set
    queries = index_set if exclude_self else query_set
    if queries.dim != index_set.dim:
        raise DomainError("query dim %s differs from index dim %s"
                          % (queries.dim, index_set.dim))
    kmax = ks[-1]
    if kmax >= index_set.size:
        raise DomainError("K=%s needs an index larger than %s rows"
                          % (kmax, index_set.size))

    chunks = [np.arange(lo, min(lo + QUERY_CHUNK, queries.size))
              for lo in range(0, queries.size, QUERY_CHUNK)]

    def run(rows):
        return _chunk_hits(index_set, queries.vectors, queries.labels, rows,
                           kmax, metric, exclude_self)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            first_hit = np.concatenate(list(pool.map(run, chunks)))
    else:
        first_hit = np.concatenate([run(rows) for rows in chunks])

    ret = {k: float(np.count_nonzero(first_hit < k)) / queries.size
           for k in ks}
    return ret


def _as_ids(partition):
    if isinstance(partition, ClusterAssignment):
        partition = partition.assignment
    return np.asarray(partition).reshape(-1)


def nmi(pred, truth):
    """Get ``2 I(A; B) / (H(A) + H(B))`` of two partitions.

    Two partitions that each hold a single cluster give 1.

    :param pred: Predicted cluster ids
    :type pred: ClusterAssignment | np.ndarray
    :param truth: Reference cluster ids
    :type truth: ClusterAssignment | np.ndarray
    :rtype: float
    :raise DomainError: Lengths differ or are zero
    """
    a, b = _as_ids(pred), _as_ids(truth)
    if a.size != b.size:
        raise DomainError("partitions of %s and %s points" % (a.size, b.size))
    if a.size == 0:
        raise DomainError("partitions are empty")
    _, a = np.unique(a, return_inverse=True)
    _, b = np.unique(b, return_inverse=True)
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1.0)
    joint /= a.size
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)

    h_a = -np.sum(pa * np.log(pa))
    h_b = -np.sum(pb * np.log(pb))
    if h_a + h_b == 0.0:
        return 1.0
    nz = joint > 0.0
    outer = np.outer(pa, pb)
    mutual = np.sum(joint[nz] * np.log(joint[nz] / outer[nz]))
    return float(np.clip(2.0 * mutual / (h_a + h_b), 0.0, 1.0))


def facility_terms(dist, facilities):
    # dist: N x N euclidean, facilities sorted. argmin picks the lower
    # facility index on ties.
    sub = dist[:, facilities]
    nearest = np.argmin(sub, axis=1)
    return -float(sub[np.arange(sub.shape[0]), nearest].sum()), nearest


def facility_score(X, S):
    """Get ``F(X, S) = -sum_i min_{j in S} ||x_i - x_j||``.

    :param X: Points
    :type X: core_math.EmbeddingBatch
    :param S: Medoids
    :type S: FacilitySet
    :rtype: float
    """
    S.check(X.size)
    sub = cdist(X.vectors, X.vectors[list(S.indices)], "euclidean")
    return -float(sub.min(axis=1).sum())


def assign_to_facilities(X, S):
    """Assign every point to its nearest medoid, ties to the lower index.

    :type X: core_math.EmbeddingBatch
    :type S: FacilitySet
    :return: Position of the medoid within ``S.indices`` per point
    :rtype: ClusterAssignment
    """
    S.check(X.size)
    sub = cdist(X.vectors, X.vectors[list(S.indices)], "euclidean")
    return ClusterAssignment(np.argmin(sub, axis=1))


def oracle_terms(dist, labels):
    score = 0.0
    medoids = {}
    margins = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        costs = dist[np.ix_(members, members)].sum(axis=0)
        best = int(np.argmin(costs))
        medoids[int(c)] = int(members[best])
        score -= float(costs[best])
        if members.size > 1:
            margins.append(np.partition(costs, 1)[1] - costs[best])
    return score, medoids, margins


def oracle_clustering_score(X):
    """Get the best clustering score reachable with the true classes.

    Every class picks, by exhaustive search, the in-class point that
    minimizes the summed distance of the class to it.

    :param X: Points and classes
    :type X: core_math.EmbeddingBatch
    :return: Summed score and class id to medoid index
    :rtype: tuple[float, dict[int, int]]
    """
    score, medoids, _ = oracle_terms(distance_values(X.vectors, "euclidean"),
                                      X.labels)
    return score, medoids


def _objective(dist, facilities, truth, gamma):
    score, nearest = facility_terms(dist, facilities)
    return score + gamma * (1.0 - nmi(nearest, truth))


def augmented_objective(X, S, gamma):
    """Get ``F(X, S) + gamma * (1 - NMI(g(S), Y))``.

    :type X: core_math.EmbeddingBatch
    :type S: FacilitySet
    :type gamma: float
    :rtype: float
    """
    S.check(X.size)
    return _objective(distance_values(X.vectors, "euclidean"),
                      list(S.indices), X.labels, gamma)


def _best_candidate(dist, truth, gamma, candidates):
    # Strictly better wins, so the first candidate in order keeps ties
    best, best_value, runner_up = None, -np.inf, -np.inf
    for cand in candidates:
        value = _objective(dist, cand, truth, gamma)
        if value > best_value:
            best, best_value, runner_up = cand, value, best_value
        elif value > runner_up:
            runner_up = value
    return best, best_value, best_value - runner_up


def _greedy(dist, truth, gamma, k):
    chosen = []
    margin = np.inf
    for _ in range(k):
        rest = [j for j in range(dist.shape[0]) if j not in chosen]
        best, _, gap = _best_candidate(
            dist, truth, gamma, (sorted(chosen + [j]) for j in rest))
        chosen = best
        margin = min(margin, gap)
    return chosen, margin


def _swap_climb(dist, truth, gamma, chosen, margin):
    current = _objective(dist, chosen, truth, gamma)
    n_swaps = 0
    while True:
        outside = [j for j in range(dist.shape[0]) if j not in chosen]
        swaps = (sorted([e for e in chosen if e != i] + [j])
                 for i in chosen for j in outside)
        best, value, _ = _best_candidate(dist, truth, gamma, swaps)
        if best is None or value <= current + SWAP_TOLERANCE:
            if best is not None:
                margin = min(margin, current - value)
            break
        chosen, current = best, value
        n_swaps += 1
    logger.debug("Swap hill climbing took %s swaps", n_swaps)
    return chosen, margin


def inference_search(dist, truth, gamma, k, mode):
    """Maximize the augmented objective over medoid sets of size k.

    :param dist: N x N euclidean distances
    :type dist: np.ndarray
    :param truth: Class ids
    :type truth: np.ndarray
    :return: Sorted medoid indices, the objective there and the smallest
        margin by which any selection made along the way won
    :rtype: tuple[list[int], float, float]
    :raise DomainError: Unknown mode or k outside [1, N]
    :raise GuardError: Exhaustive search on more than 12 points
    """
    n = dist.shape[0]
    if mode not in INFERENCE_MODES:
        raise DomainError("unknown inference mode %r" % mode)
    if not 1 <= k <= n:
        raise DomainError("need 1 <= k <= N, got k=%s N=%s" % (k, n))
    if gamma < 0:
        raise DomainError("gamma must be non-negative, got %r" % gamma)
    if mode == "exhaustive":
        if n > EXHAUSTIVE_MAX_POINTS:
            raise GuardError("exhaustive inference limited to %s points, "
                             "got %s" % (EXHAUSTIVE_MAX_POINTS, n))
        best, value, margin = _best_candidate(
            dist, truth, gamma,
            (list(c) for c in itertools.combinations(range(n), k)))
        return best, value, margin
    chosen, margin = _greedy(dist, truth, gamma, k)
    if mode == "greedy-with-swaps":
        chosen, margin = _swap_climb(dist, truth, gamma, chosen, margin)
    return chosen, _objective(dist, chosen, truth, gamma), margin


def loss_augmented_inference(X, gamma, k, mode="greedy"):
    """Find the medoid set maximizing ``F(X, S) + gamma * (1 - NMI)``.

    ``greedy`` adds, k times, the point raising the objective most.
    ``greedy-with-swaps`` then exchanges one medoid at a time while that
    strictly improves the objective. ``exhaustive`` scores every set and
    is limited to 12 points.

    :param X: Points and classes
    :type X: core_math.EmbeddingBatch
    :param gamma: Weight of the structured margin
    :type gamma: float
    :param k: Number of medoids
    :type k: int
    :param mode: ``greedy``, ``greedy-with-swaps`` or ``exhaustive``
    :type mode: str
    :rtype: FacilitySet
    """
    chosen, _, _ = inference_search(distance_values(X.vectors, "euclidean"),
                                    X.labels, gamma, k, mode)
    return FacilitySet(tuple(chosen))
