"""Index sets and hyperparameter records consumed by the losses."""

import math
from dataclasses import dataclass, field

import numpy as np

from errors import DomainError


@dataclass(frozen=True)
class PairIndexSet:
    """Positive and negative index pairs of one batch.

    :param positives: ``(i, j)`` pairs sharing a label, ``i != j``
    :type positives: list[tuple[int, int]]
    :param negatives: ``(i, j)`` pairs with differing labels
    :type negatives: list[tuple[int, int]]
    """

    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)

    def validate(self, labels):
        """Check the pairs against ``labels``.

        :param labels: Batch labels
        :type labels: np.ndarray
        :raise DomainError: Index out of range or label rule broken
        """
        n = len(labels)
        for kind, pairs, same in (("positive", self.positives, True),
                                  ("negative", self.negatives, False)):
            for i, j in pairs:
                if not (0 <= i < n and 0 <= j < n):
                    raise DomainError("%s pair (%s, %s) out of range for "
                                      "batch of %s" % (kind, i, j, n))
                if (labels[i] == labels[j]) != same or (same and i == j):
                    raise DomainError("(%s, %s) is not a valid %s pair"
                                      % (i, j, kind))


@dataclass(frozen=True)
class TripletIndexSet:
    """``(anchor, positive, negative)`` index triples of one batch."""

    triplets: list = field(default_factory=list)

    def as_array(self):
        return np.asarray(self.triplets, dtype=np.int64).reshape(-1, 3)

    def validate(self, labels):
        n = len(labels)
        for a, p, neg in self.triplets:
            if not all(0 <= e < n for e in (a, p, neg)):
                raise DomainError("triplet (%s, %s, %s) out of range for "
                                  "batch of %s" % (a, p, neg, n))
            if a == p or labels[a] != labels[p] or labels[a] == labels[neg]:
                raise DomainError("(%s, %s, %s) is not a valid triplet"
                                  % (a, p, neg))


@dataclass(frozen=True)
class EpisodeSpec:
    """Shape of one episode: K classes, support and query per class."""

    classes_per_episode: int = 4
    support_per_class: int = 2
    query_per_class: int = 2

    def __post_init__(self):
        if self.classes_per_episode < 2:
            raise DomainError("an episode needs at least 2 classes")
        if self.support_per_class < 1 or self.query_per_class < 1:
            raise DomainError("support and query sizes must be positive")

    @property
    def samples_per_class(self):
        return self.support_per_class + self.query_per_class


@dataclass(frozen=True)
class EpisodeGroup:
    """Support and query row indices of one class inside one episode."""

    label: int
    support: tuple
    query: tuple


@dataclass
class MarginLossParams:
    """Per-class learnable margin beta and separation alpha."""

    beta: np.ndarray
    alpha: float = 0.2
    trainable_beta: bool = True

    def __post_init__(self):
        self.beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.beta)):
            raise DomainError("beta must be finite")
        if self.alpha <= 0:
            raise DomainError("alpha must be positive, got %r" % self.alpha)

    @classmethod
    def for_classes(cls, n_classes, beta_init=1.2, alpha=0.2,
                    trainable_beta=True):
        return cls(np.full(n_classes, beta_init), alpha, trainable_beta)


@dataclass(frozen=True)
class AngularParams:
    """Angle bound alpha, in degrees."""

    alpha_degrees: float = 45.0

    def __post_init__(self):
        if not 0.0 < self.alpha_degrees < 90.0:
            raise DomainError("alpha must lie in (0, 90) degrees, got %r"
                              % self.alpha_degrees)

    @property
    def tan_sq(self):
        return math.tan(math.radians(self.alpha_degrees)) ** 2


@dataclass(frozen=True)
class RankedListParams:
    """Boundaries, balance and negative weighting of the ranked list loss.

    Positives are pulled inside ``alpha - m``, negatives pushed beyond
    ``alpha``. ``temperature`` scales the negative weights
    ``exp(T (alpha - d))``; 0 weighs negatives uniformly.
    """

    alpha: float = 1.2
    m: float = 0.4
    lam: float = 1.0
    temperature: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.m < self.alpha:
            raise DomainError("need 0 < m < alpha, got m=%r alpha=%r"
                              % (self.m, self.alpha))
        if self.lam < 0 or self.temperature < 0:
            raise DomainError("lambda and temperature must be non-negative")


INFERENCE_MODES = ("greedy", "greedy-with-swaps", "exhaustive")

# Exhaustive loss-augmented inference enumerates C(N, k) sets
EXHAUSTIVE_MAX_POINTS = 12


@dataclass(frozen=True)
class StructClustParams:
    """Structured margin weight gamma and the inference used for the max."""

    gamma: float = 1.0
    inference: str = "greedy"

    def __post_init__(self):
        if self.gamma <= 0:
            raise DomainError("gamma must be positive, got %r" % self.gamma)
        if self.inference not in INFERENCE_MODES:
            raise DomainError("unknown inference %r" % self.inference)
