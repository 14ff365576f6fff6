"""Batch composition and in-batch mining.

Composers pick dataset sample ids for the next batch (class balanced,
n-pairs or episodic). Miners look at the current embeddings of a composed
batch and choose which triplets or pairs the loss sees (semi-hard,
distance weighted or all pairs). Both hand the loss a ``BatchPlan``.

All randomness goes through a ``SamplerRng`` so that a seed and a call
sequence fix every batch.
"""

import logging
from dataclasses import dataclass

import numpy as np

from errors import DomainError
from losses.index_sets import EpisodeGroup, PairIndexSet, TripletIndexSet

logger = logging.getLogger(__name__)

PLAN_KINDS = {
    "triplets": "triplets",
    "pairs": "pairs",
    "npairs": "npairs_layout",
    "episode": "episode_layout",
}

# Distances are clamped into (0, 2) before the log-density is taken
DISTANCE_EPS = 1e-6


@dataclass(frozen=True)
class BatchPlan:
    """What a loss sees of a batch: one populated field, named by kind."""

    kind: str
    triplets: TripletIndexSet = None
    pairs: PairIndexSet = None
    npairs_layout: list = None
    episode_layout: list = None

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise DomainError("unknown plan kind %r" % self.kind)
        filled = [name for name in PLAN_KINDS.values()
                  if getattr(self, name) is not None]
        if filled != [PLAN_KINDS[self.kind]]:
            raise DomainError("plan of kind %r populates %s"
                              % (self.kind, filled))


class SamplerRng:
    """Seeded PCG64 stream; ``spawn`` derives independent child streams.

    :param seed: Root seed
    :type seed: int
    :param key: Spawn path below the root seed
    :type key: tuple[int]
    """

    def __init__(self, seed, key=()):
        self.seed = int(seed)
        self.key = tuple(int(e) for e in key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def spawn(self, *key):
        return SamplerRng(self.seed, self.key + key)

    def get_state(self):
        return self.generator.bit_generator.state

    def set_state(self, state):
        self.generator.bit_generator.state = state


def class_index(labels):
    """Get class id to ascending sample ids.

    :param labels: Label of every sample
    :type labels: np.ndarray
    :rtype: dict[int, np.ndarray]
    """
    labels = np.asarray(labels)
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def _pick_classes(index, n_classes, min_samples, rng, what):
    eligible = np.array(sorted(c for c, ids in index.items()
                               if len(ids) >= min_samples), dtype=np.int64)
    if eligible.size < n_classes:
        raise DomainError("%s needs %s classes with >= %s samples, found %s "
                          "(short by %s)" % (what, n_classes, min_samples,
                                             eligible.size,
                                             n_classes - eligible.size))
    return rng.generator.choice(eligible, size=n_classes, replace=False)


def class_balanced_compose(index, n_classes, per_class, rng,
                           require_positives=False):
    """Get ``n_classes * per_class`` sample ids, ``per_class`` per class.

    :param index: Class id to sample ids
    :type index: dict[int, np.ndarray]
    :param n_classes: Number of distinct classes in the batch
    :type n_classes: int
    :param per_class: Samples drawn per class, without replacement
    :type per_class: int
    :param rng: Random stream
    :type rng: SamplerRng
    :param require_positives: Refuse ``per_class < 2``
    :type require_positives: bool
    :rtype: list[int]
    :raise DomainError: Too few classes or samples
    """
    if n_classes < 1 or per_class < 1:
        raise DomainError("need n_classes >= 1 and per_class >= 1")
    if require_positives and per_class < 2:
        raise DomainError("per_class=%s leaves no positive pairs" % per_class)
    classes = _pick_classes(index, n_classes, per_class, rng,
                            "class balanced batch")
    ret = []
    for c in classes:
        ret += rng.generator.choice(index[int(c)], size=per_class,
                                    replace=False).tolist()
    return ret


def npairs_compose(index, n_classes, rng):
    """Get 2 samples from each of ``n_classes`` distinct classes.

    The batch is laid out ``a1, p1, a2, p2, ...`` and the plan records
    the ``(anchor, positive)`` row pairs.

    :type index: dict[int, np.ndarray]
    :type n_classes: int
    :type rng: SamplerRng
    :rtype: tuple[list[int], BatchPlan]
    :raise DomainError: Fewer than ``n_classes`` classes with 2 samples
    """
    if n_classes < 2:
        raise DomainError("n-pairs needs at least 2 classes")
    classes = _pick_classes(index, n_classes, 2, rng, "n-pairs batch")
    ids = []
    layout = []
    for c in classes:
        layout.append((len(ids), len(ids) + 1))
        ids += rng.generator.choice(index[int(c)], size=2,
                                    replace=False).tolist()
    return ids, BatchPlan("npairs", npairs_layout=layout)


def episodic_compose(index, spec, episodes_per_batch, rng):
    """Get one or more episodes concatenated into a batch.

    Each episode draws ``spec.classes_per_episode`` classes among those
    with enough samples, then support and query ids without replacement.
    Episodes are independent, so their classes may overlap.

    :type index: dict[int, np.ndarray]
    :type spec: losses.index_sets.EpisodeSpec
    :type episodes_per_batch: int
    :type rng: SamplerRng
    :rtype: tuple[list[int], BatchPlan]
    """
    if episodes_per_batch < 1:
        raise DomainError("need at least one episode per batch")
    n_support = spec.support_per_class
    ids = []
    episodes = []
    for _ in range(episodes_per_batch):
        classes = _pick_classes(index, spec.classes_per_episode,
                                spec.samples_per_class, rng, "episode")
        groups = []
        for c in classes:
            start = len(ids)
            ids += rng.generator.choice(index[int(c)],
                                        size=spec.samples_per_class,
                                        replace=False).tolist()
            rows = tuple(range(start, len(ids)))
            groups.append(EpisodeGroup(int(c), rows[:n_support],
                                       rows[n_support:]))
        episodes.append(groups)
    return ids, BatchPlan("episode", episode_layout=episodes)


def semi_hard_mine(batch, distances, margin=0.2):
    """Pick one negative for every ``(anchor, positive)`` pair.

    The negative is the closest one with ``d(a, n) > d(a, p)``. When no
    negative is farther than the positive, the farthest negative is
    taken. Ties go to the lowest index. Anchors lacking a positive or a
    negative are skipped.

    :param batch: Embeddings, only labels are used
    :type batch: core_math.EmbeddingBatch
    :param distances: Distances of the batch
    :type distances: core_math.DistanceMatrix
    :param margin: Margin of the triplet loss, for statistics only
    :type margin: float
    :rtype: BatchPlan
    :raise DomainError: No anchor has both a positive and a negative
    """
    d = distances.values
    labels = batch.labels
    triplets = []
    n_in_margin = 0
    for a in range(batch.size):
        same = labels == labels[a]
        neg = np.flatnonzero(~same)
        same[a] = False
        pos = np.flatnonzero(same)
        if pos.size == 0 or neg.size == 0:
            continue
        d_pos = d[a, pos][:, None]
        d_neg = np.broadcast_to(d[a, neg], (pos.size, neg.size))
        farther = d_neg > d_pos
        semi = np.argmin(np.where(farther, d_neg, np.inf), axis=1)
        farthest = np.argmax(d[a, neg])
        found = farther.any(axis=1)
        chosen = np.where(found, semi, farthest)
        n_in_margin += int(np.count_nonzero(
            found & (d_neg[np.arange(pos.size), chosen]
                     < d_pos[:, 0] + margin)))
        triplets += [(a, int(p), int(neg[j])) for p, j in zip(pos, chosen)]
    if not triplets:
        raise DomainError("no anchor has both a positive and a negative")
    logger.debug("Mined %s triplets, %s semi-hard within margin %s",
                 len(triplets), n_in_margin, margin)
    return BatchPlan("triplets", triplets=TripletIndexSet(triplets))


def all_pairs(batch):
    """Get every positive and negative pair ``i < j`` of the batch."""
    labels = batch.labels
    upper = np.triu(np.ones((batch.size, batch.size), dtype=bool), k=1)
    same = labels[:, None] == labels[None, :]
    positives = [tuple(e) for e in np.argwhere(upper & same).tolist()]
    negatives = [tuple(e) for e in np.argwhere(upper & ~same).tolist()]
    return BatchPlan("pairs", pairs=PairIndexSet(positives, negatives))


def distance_weights(distances, dim, clip=(0.0, None),
                     max_weight_ratio=1e4):
    """Get sampling probabilities proportional to the inverse density of
    distances between uniform points on the unit sphere in ``dim`` dims.

    ``log q(d) = (D - 2) log d + (D - 3) / 2 log(1 - d^2 / 4)``. Weights are
    ``1 / q`` rescaled so that the smallest is 1, then clipped to
    ``[clip[0], clip[1]]``; an open upper bound becomes
    ``max_weight_ratio``.

    :param distances: Candidate distances in [0, 2]
    :type distances: np.ndarray
    :param dim: Embedding dimension, at least 3
    :type dim: int
    :rtype: np.ndarray
    """
    if dim < 3:
        raise DomainError("distance weighting needs D >= 3, got %s" % dim)
    d = np.clip(np.asarray(distances, dtype=np.float64), DISTANCE_EPS,
                2.0 - DISTANCE_EPS)
    log_q = (dim - 2.0) * np.log(d) \
        + (dim - 3.0) / 2.0 * np.log(1.0 - 0.25 * d * d)
    log_w = -log_q - np.min(-log_q)
    upper = max_weight_ratio if clip[1] is None else clip[1]
    weights = np.clip(np.exp(np.minimum(log_w, np.log(upper))), clip[0],
                      upper)
    total = weights.sum()
    if total <= 0.0:
        return np.full(d.size, 1.0 / d.size)
    return weights / total


def _negative_probabilities(batch, distances, anchor, clip,
                            max_weight_ratio):
    neg = np.flatnonzero(batch.labels != batch.labels[anchor])
    if neg.size == 0:
        raise DomainError("anchor %s has no negative" % anchor)
    if batch.dim < 3:
        logger.warning("Distance weighted sampling needs D >= 3, got %s; "
                       "sampling negatives uniformly", batch.dim)
        return neg, np.full(neg.size, 1.0 / neg.size)
    probs = distance_weights(distances.values[anchor, neg], batch.dim, clip,
                             max_weight_ratio)
    return neg, probs


def distance_weighted_sample(batch, distances, anchor, rng, clip=(0.0, None),
                             max_weight_ratio=1e4):
    """Draw one negative for ``anchor`` by distance weighted sampling.

    :param batch: L2-normalized embeddings
    :type batch: core_math.EmbeddingBatch
    :param distances: Euclidean distances of the batch
    :type distances: core_math.DistanceMatrix
    :param anchor: Row of the anchor
    :type anchor: int
    :param rng: Random stream
    :type rng: SamplerRng
    :param clip: Lower and upper weight bounds
    :type clip: tuple
    :rtype: int
    :raise DomainError: The anchor has no negative
    """
    neg, probs = _negative_probabilities(batch, distances, anchor, clip,
                                         max_weight_ratio)
    return int(rng.generator.choice(neg, p=probs))


def distance_weighted_pairs(batch, distances, rng, clip=(0.0, None),
                            max_weight_ratio=1e4):
    """Get all positive pairs plus, for every anchor, as many distance
    weighted negatives as it has positives (without replacement when the
    anchor has enough negatives).

    :rtype: BatchPlan
    :raise DomainError: No anchor has both a positive and a negative
    """
    labels = batch.labels
    positives = []
    negatives = []
    for a in range(batch.size):
        pos = np.flatnonzero(labels == labels[a])
        pos = pos[pos != a]
        if pos.size == 0 or np.all(labels == labels[a]):
            continue
        neg, probs = _negative_probabilities(batch, distances, a, clip,
                                             max_weight_ratio)
        n_draws = min(pos.size, np.count_nonzero(probs))
        drawn = rng.generator.choice(neg, size=n_draws, replace=False,
                                     p=probs)
        positives += [(a, int(p)) for p in pos]
        negatives += [(a, int(n)) for n in drawn]
    if not positives:
        raise DomainError("no anchor has both a positive and a negative")
    return BatchPlan("pairs", pairs=PairIndexSet(positives, negatives))
