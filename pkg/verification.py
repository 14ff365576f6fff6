"""Self-checks run by ``app.py verify``.

Every check compares an operation against an independent oracle: finite
differences for loss gradients, brute force for mining, retrieval and
facility location, direct entropies for NMI and a chi-square test for the
distance weighted sampler. The default sizes are the full suite, which
runs in a few minutes; ``quick`` shrinks every check for a fast look.
"""

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import chisquare

from batch_sampler import (SamplerRng, class_index, distance_weighted_sample,
                           distance_weights, semi_hard_mine)
from clustering_eval import (assign_to_facilities, augmented_objective,
                             loss_augmented_inference, nmi, recall_at_k)
from core_math import (DistanceMatrix, EmbeddingBatch, distance_values,
                       grad_check, normalize_rows)
from definitions import LOSS_DEFAULTS, RECALL_KS, SINGLE_MODEL_LOSS_NAMES
from errors import ConfigError
from losses.cluster_losses import struct_clust_loss
from losses.index_sets import StructClustParams
from losses.loss_registry import (compose, evaluate_loss, init_parameters,
                                  loss_params, mine)

logger = logging.getLogger(__name__)

CHECK_GROUPS = ("grad-check", "mining", "recall", "nmi", "facility",
                "sampler")
FAULTS = ("grad-sign",)
# Loss whose gradient sign is flipped by the grad-sign fault
FAULT_LOSS = "proxy-nca"

# Small batches: at most 16 rows of at most 8 dims
CASE_CLASSES = 6
CASE_SAMPLES = 6
CASE_DIM = 6
CASE_PARAMS = {"proto": {"classes_per_episode": 3, "support_per_class": 2,
                         "query_per_class": 2, "episodes_per_batch": 1}}
GRAD_STEP = 1e-5
GRAD_TOLERANCE = 1e-4
CHI_SQUARE_LEVEL = 0.01
MIN_EXPECTED_COUNT = 5.0
# Largest to smallest sampling weight allowed
SAMPLER_WEIGHT_RATIO = 1e4
# Sizes of every check group under quick
QUICK_SIZES = {
    "grad-check": {"n_batches": 5},
    "mining": {"n_batches": 200, "max_size": 32},
    "recall": {"n_sets": 3, "max_size": 120},
    "nmi": {"n_pairs": 100},
    "facility": {"n_exhaustive": 4, "n_separated": 10},
    "sampler": {"n_configs": 5, "n_draws": 20000},
}


@dataclass
class CheckResult:
    """Outcome of one named check."""

    group: str
    name: str
    passed: bool
    detail: str = ""

    def status_line(self):
        return "%-4s %-10s %-22s %s" % ("ok" if self.passed else "FAIL",
                                        self.group, self.name, self.detail)


@dataclass
class LossCase:
    """A small batch bound to one loss, ready for ``grad_check``.

    ``params`` are the trainable arrays, ``hyper`` the loss
    hyperparameters and ``plan`` the mined plan ``evaluator`` is bound to.
    """

    name: str
    batch: EmbeddingBatch
    evaluator: object
    params: dict
    plan: object = None
    hyper: dict = None
    normalize: bool = False


def make_loss_case(name, seed, fault=None):
    """Compose and mine a random batch the way training does.

    :param name: Single-model loss name
    :type name: str
    :param seed: Seed of the batch, embeddings and trainable arrays
    :type seed: int
    :param fault: ``grad-sign`` flips the embedding gradient of
        ``FAULT_LOSS``
    :type fault: str | None
    :rtype: LossCase
    """
    rng = SamplerRng(seed)
    defaults = LOSS_DEFAULTS[name]
    params = loss_params(name, CASE_PARAMS.get(name))
    sampler = defaults["sampler"]
    normalize = defaults["normalize"]
    pool_labels = np.repeat(np.arange(CASE_CLASSES), CASE_SAMPLES)
    n_classes = CASE_CLASSES if sampler == "npairs" else 4
    ids, plan = compose(name, sampler, class_index(pool_labels), n_classes, 3,
                        params, rng)
    vectors = rng.generator.standard_normal((len(ids), CASE_DIM))
    batch = EmbeddingBatch(vectors, pool_labels[ids])
    plan = mine(sampler, batch, plan, params, normalize, rng)
    trainable = init_parameters(name, params, CASE_CLASSES, CASE_DIM,
                                rng.generator)

    def evaluator(b, p):
        ret = evaluate_loss(name, b, plan, params, p, normalize)
        if fault == "grad-sign" and name == FAULT_LOSS:
            ret = replace(ret, grad_embeddings=-ret.grad_embeddings)
        return ret

    return LossCase(name, batch, evaluator, trainable, plan, params,
                    normalize)


def check_gradients(n_batches=20, seed=0, fault=None, names=None):
    """Run ``grad_check`` on random batches of every single-model loss.

    A loss passes when every batch away from a hinge kink passes and at
    least one batch was checked.

    :rtype: list[CheckResult]
    """
    ret = []
    for name in names or SINGLE_MODEL_LOSS_NAMES:
        worst, worst_plain, n_skipped, failed = 0.0, 0.0, 0, None
        for b in range(n_batches):
            case = make_loss_case(name, seed * 1000 + b, fault)
            report = grad_check(case.evaluator, case.batch, GRAD_STEP,
                                GRAD_TOLERANCE, case.params)
            if report.skipped:
                n_skipped += 1
                continue
            worst = max(worst, report.max_rel_error)
            worst_plain = max(worst_plain, report.max_plain_error)
            if not report.passed and failed is None:
                failed = (b, report.worst)
        passed = failed is None and n_skipped < n_batches
        detail = "max rel error %.2e (unfloored %.2e), %s/%s batches at "\
            "kinks" % (worst, worst_plain, n_skipped, n_batches)
        if failed is not None:
            detail += ", batch %s fails at %s[%s]" % (failed[0], *failed[1])
        ret.append(CheckResult("grad-check", name, passed, detail))
    return ret


def brute_force_semi_hard(labels, d):
    """Reference semi-hard mining by nested loops over the distances."""
    ret = []
    n = len(labels)
    for a in range(n):
        negatives = [j for j in range(n) if labels[j] != labels[a]]
        positives = [j for j in range(n) if j != a and labels[j] == labels[a]]
        if not negatives or not positives:
            continue
        for p in positives:
            farther = [j for j in negatives if d[a][j] > d[a][p]]
            if farther:
                chosen = min(farther, key=lambda j: (d[a][j], j))
            else:
                chosen = max(negatives, key=lambda j: (d[a][j], -j))
            ret.append((a, p, chosen))
    return ret


def check_mining(n_batches=1000, max_size=64, seed=0):
    generator = np.random.default_rng(seed)
    for b in range(n_batches):
        size = int(generator.integers(4, max_size + 1))
        labels = generator.integers(0, max(2, size // 3), size)
        if np.unique(labels).size < 2:
            labels[0] = labels[0] + 1
        vectors = generator.standard_normal((size, 4))
        d = distance_values(vectors, "squared-euclidean")
        batch = EmbeddingBatch(vectors, labels)
        plan = semi_hard_mine(batch, DistanceMatrix(d, "squared-euclidean"))
        expected = brute_force_semi_hard(labels.tolist(), d.tolist())
        if list(plan.triplets.triplets) != expected:
            return [CheckResult("mining", "semi-hard", False,
                                "batch %s of size %s differs" % (b, size))]
    return [CheckResult("mining", "semi-hard", True,
                        "%s batches of up to %s rows" % (n_batches,
                                                         max_size))]


def naive_recall(vectors, labels, ks, metric):
    """Reference Recall@K by sorting all pairs per query, ties by index."""
    n = len(labels)
    hits = Counter()
    for q in range(n):
        scored = []
        for j in range(n):
            if j == q:
                continue
            if metric == "hamming":
                dist = sum(1 for u, v in zip(vectors[q], vectors[j]) if u != v)
            else:
                dist = math.fsum((u - v) ** 2
                                 for u, v in zip(vectors[q], vectors[j]))
            scored.append((dist, j))
        scored.sort()
        for k in ks:
            if any(labels[j] == labels[q] for _, j in scored[:k]):
                hits[k] += 1
    return {k: hits[k] / n for k in ks}


def check_recall(n_sets=4, max_size=500, seed=0):
    generator = np.random.default_rng(seed)
    ret = []
    for metric in ("euclidean", "hamming"):
        passed, detail = True, "%s sets of up to %s rows" % (n_sets, max_size)
        for s in range(n_sets):
            size = int(generator.integers(RECALL_KS[-1] + 2, max_size + 1))
            if s == 0:
                size = max_size
            labels = generator.integers(0, max(2, size // 8), size)
            if metric == "hamming":
                vectors = generator.integers(0, 2, (size, 12)).astype(float)
            else:
                vectors = generator.standard_normal((size, 5))
            got = recall_at_k(EmbeddingBatch(vectors, labels), metric=metric)
            expected = naive_recall(vectors.tolist(), labels.tolist(),
                                    RECALL_KS, metric)
            if got != expected:
                passed = False
                detail = "set %s of size %s: %s != %s" % (s, size, got,
                                                          expected)
                break
        ret.append(CheckResult("recall", metric, passed, detail))
    return ret


def entropy_nmi(a, b):
    """Reference NMI from counted entropies."""
    n = len(a)
    pa, pb, pab = Counter(a), Counter(b), Counter(zip(a, b))
    h_a = -sum(c / n * math.log(c / n) for c in pa.values())
    h_b = -sum(c / n * math.log(c / n) for c in pb.values())
    if h_a + h_b == 0.0:
        return 1.0
    mutual = sum(c / n * math.log(c * n / (pa[x] * pb[y]))
                 for (x, y), c in pab.items())
    return 2.0 * mutual / (h_a + h_b)


def check_nmi(n_pairs=200, seed=0):
    ret = [
        CheckResult("nmi", "identical",
                    abs(nmi([0, 0, 1, 2], [5, 5, 7, 9]) - 1.0) < 1e-12),
        CheckResult("nmi", "independent",
                    abs(nmi([0, 0, 1, 1], [0, 1, 0, 1])) < 1e-12),
    ]
    generator = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        size = int(generator.integers(2, 60))
        a = generator.integers(0, int(generator.integers(1, 8)), size)
        b = generator.integers(0, int(generator.integers(1, 8)), size)
        worst = max(worst, abs(nmi(a, b) - entropy_nmi(a.tolist(),
                                                       b.tolist())))
    ret.append(CheckResult("nmi", "entropy-oracle", worst <= 1e-10,
                           "max deviation %.1e over %s pairs"
                           % (worst, n_pairs)))
    return ret


def brute_force_objective(vectors, labels, chosen, gamma):
    """Reference ``F(X, S) + gamma (1 - NMI)`` by loops."""
    score = 0.0
    assignment = []
    for x in vectors:
        dists = [math.dist(x, vectors[j]) for j in chosen]
        nearest = min(range(len(chosen)), key=lambda i: (dists[i], i))
        assignment.append(nearest)
        score -= dists[nearest]
    return score + gamma * (1.0 - entropy_nmi(assignment, list(labels)))


def separated_instance(generator, n_classes=3, per_class=3, spread=20.0):
    centers = spread * generator.standard_normal((n_classes, 4))
    labels = np.repeat(np.arange(n_classes), per_class)
    vectors = centers[labels] + generator.standard_normal((labels.size, 4))
    return EmbeddingBatch(vectors, labels)


def same_clustering(batch, first, second):
    """Whether two medoid sets induce the same partition of the points."""
    return nmi(assign_to_facilities(batch, first),
               assign_to_facilities(batch, second)) > 1.0 - 1e-12


def check_facility(n_exhaustive=10, n_separated=50, seed=0):
    generator = np.random.default_rng(seed)
    ret = []
    passed, detail = True, "%s instances of up to 8 points" % n_exhaustive
    for i in range(n_exhaustive):
        size = int(generator.integers(4, 9))
        labels = generator.integers(0, 3, size)
        vectors = generator.standard_normal((size, 3))
        k = int(np.unique(labels).size)
        gamma = float(generator.uniform(0.0, 2.0))
        best = max(brute_force_objective(vectors.tolist(), labels, c, gamma)
                   for c in itertools.combinations(range(size), k))
        found = loss_augmented_inference(EmbeddingBatch(vectors, labels),
                                         gamma, k, "exhaustive")
        value = brute_force_objective(vectors.tolist(), labels,
                                      list(found.indices), gamma)
        if abs(value - best) > 1e-9:
            passed = False
            detail = "instance %s: %r below %r" % (i, value, best)
            break
    ret.append(CheckResult("facility", "exhaustive", passed, detail))

    greedy_ok, zero_ok, order_ok, worst_loss = True, True, True, 0.0
    for _ in range(n_separated):
        batch = separated_instance(generator)
        k = int(np.unique(batch.labels).size)
        for gamma in (0.5, 1.0):
            greedy = loss_augmented_inference(batch, gamma, k, "greedy")
            exhaustive = loss_augmented_inference(batch, gamma, k,
                                                  "exhaustive")
            greedy_ok &= same_clustering(batch, greedy, exhaustive)
            best = augmented_objective(batch, exhaustive, gamma)
            for mode in ("greedy", "greedy-with-swaps"):
                found = loss_augmented_inference(batch, gamma, k, mode)
                order_ok &= augmented_objective(batch, found, gamma) \
                    <= best + 1e-9
            value = struct_clust_loss(batch, StructClustParams(gamma),
                                      normalize=False).value
            worst_loss = max(worst_loss, value)
            zero_ok &= value <= 1e-9
    ret.append(CheckResult("facility", "greedy-separated", bool(greedy_ok),
                           "%s instances" % n_separated))
    ret.append(CheckResult("facility", "exhaustive-dominates",
                           bool(order_ok), "%s instances" % n_separated))
    ret.append(CheckResult("facility", "struct-clust-zero", bool(zero_ok),
                           "largest loss %.1e" % worst_loss))
    return ret


def inverse_density_weights(distances, dim):
    """Reference weights ``1 / q(d)`` of uniform points on the unit sphere,
    ``q(d) = d^(D-2) (1 - d^2 / 4)^((D-3) / 2)``, without any clipping."""
    return [1.0 / (d ** (dim - 2) * (1.0 - d * d / 4.0) ** ((dim - 3) / 2.0))
            for d in distances]


def _pooled(observed, expected):
    # Bins expected below MIN_EXPECTED_COUNT are merged into one
    small = expected < MIN_EXPECTED_COUNT
    if not small.any():
        return observed, expected
    return (np.append(observed[~small], observed[small].sum()),
            np.append(expected[~small], expected[small].sum()))


def _sampler_config(generator):
    # Redrawn until the weight clip is inactive, so 1 / q is the target
    n_redrawn = 0
    while True:
        dim = int(generator.integers(3, 9))
        size = int(generator.integers(8, 17))
        labels = np.arange(size) % 3
        vectors = normalize_rows(generator.standard_normal((size, dim)))[0]
        anchor = int(generator.integers(0, size))
        neg = np.flatnonzero(labels != labels[anchor])
        d = np.linalg.norm(vectors[neg] - vectors[anchor], axis=1)
        weights = inverse_density_weights(d.tolist(), dim)
        if max(weights) <= SAMPLER_WEIGHT_RATIO * min(weights):
            return (EmbeddingBatch(vectors, labels, normalized=True), anchor,
                    neg, weights, n_redrawn)
        n_redrawn += 1


def check_sampler(n_configs=20, n_draws=100000, seed=0):
    """Chi-square test of ``distance_weighted_sample`` per configuration.

    Each configuration must reach p above ``CHI_SQUARE_LEVEL / n_configs``,
    so the whole family holds at level ``CHI_SQUARE_LEVEL``.
    """
    generator = np.random.default_rng(seed)
    level = CHI_SQUARE_LEVEL / n_configs
    worst_p, worst_dev, n_redrawn = 1.0, 0.0, 0
    for c in range(n_configs):
        batch, anchor, neg, weights, redrawn = _sampler_config(generator)
        n_redrawn += redrawn
        total = math.fsum(weights)
        probs = np.array([w / total for w in weights])
        dist = DistanceMatrix(distance_values(batch.vectors, "euclidean"),
                              "euclidean")
        got = distance_weights(dist.values[anchor, neg], batch.dim,
                               max_weight_ratio=SAMPLER_WEIGHT_RATIO)
        worst_dev = max(worst_dev, float(np.max(np.abs(got - probs))))
        rng = SamplerRng(seed, (c,))
        draws = Counter(distance_weighted_sample(
            batch, dist, anchor, rng, max_weight_ratio=SAMPLER_WEIGHT_RATIO)
            for _ in range(n_draws))
        observed = np.array([draws[j] for j in neg], dtype=np.float64)
        obs, exp = _pooled(observed, probs * n_draws)
        if obs.size < 2:
            continue
        p = float(chisquare(obs, exp * (obs.sum() / exp.sum())).pvalue)
        worst_p = min(worst_p, p)
    return [
        CheckResult("sampler", "inverse-density", worst_dev <= 1e-9,
                    "max probability deviation %.1e" % worst_dev),
        CheckResult("sampler", "distance-weighted", worst_p > level,
                    "smallest p %.3g over %s configurations (level %.3g), "
                    "%s redrawn with an active clip"
                    % (worst_p, n_configs, level, n_redrawn)),
    ]


def run_checks(only=None, fault=None, seed=0, quick=False):
    """Run the selected check groups.

    :param only: Group names, all groups when empty
    :type only: list[str] | None
    :param fault: Fault to inject, one of ``FAULTS``
    :type fault: str | None
    :param quick: Run every group at the smaller ``QUICK_SIZES``
    :type quick: bool
    :rtype: list[CheckResult]
    :raise ConfigError: Unknown group or fault
    """
    groups = list(only or CHECK_GROUPS)
    unknown = [g for g in groups if g not in CHECK_GROUPS]
    if unknown:
        raise ConfigError("unknown check groups %s, expected some of %s"
                          % (unknown, ", ".join(CHECK_GROUPS)), "only")
    if fault is not None and fault not in FAULTS:
        raise ConfigError("unknown fault %r" % fault, "inject_fault")
    runners = {
        "grad-check": lambda **kw: check_gradients(fault=fault, **kw),
        "mining": check_mining,
        "recall": check_recall,
        "nmi": check_nmi,
        "facility": check_facility,
        "sampler": check_sampler,
    }
    ret = []
    for group in CHECK_GROUPS:
        if group in groups:
            logger.info("Running %s checks", group)
            sizes = QUICK_SIZES[group] if quick else {}
            ret += runners[group](seed=seed, **sizes)
    return ret
