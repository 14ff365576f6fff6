"""Training loop binding samplers, losses, encoder and optimizer.

A ``TrainState`` is owned by one thread. ``train_step`` returns a new
state and leaves its input untouched; ``train_run`` advances a state in
place and evaluates it on the held out classes every ``eval_every`` steps.
"""

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from batch_sampler import SamplerRng, class_index
from clustering_eval import ClusterAssignment, EvalReport, nmi, recall_at_k
from core_math import EmbeddingBatch, normalize_rows
from definitions import LOSS_DEFAULTS, RECALL_KS
from errors import ConfigError, TrainingDivergence
from losses.loss_registry import (check_compatible, compose, evaluate_loss,
                                  init_parameters, loss_params, mine,
                                  project_parameters)
from trainer.encoder import Encoder
from trainer.optimizers import make_optimizer

logger = logging.getLogger(__name__)

# Spawn keys of the streams derived from the experiment seed
BATCH_STREAM = 1
PARAMETER_STREAM = 2
KMEANS_STREAM = 3


@dataclass
class LossConfig:
    """Loss, sampler and batch composition of a run.

    :param name: Single-model loss name
    :type name: str
    :param sampler: Sampler name
    :type sampler: str
    :param params: Loss hyperparameters (see ``loss_registry.loss_params``)
    :type params: dict
    :param normalize: Losses and evaluation use L2-normalized embeddings
    :type normalize: bool
    :param n_classes: Classes per batch (clamped to what the data holds)
    :type n_classes: int
    :param per_class: Samples per class for class balanced batches
    :type per_class: int
    :param accumulate: Batches whose gradients are averaged per update
    :type accumulate: int
    """

    name: str
    sampler: str
    params: dict
    normalize: bool
    n_classes: int = 30
    per_class: int = 4
    accumulate: int = 1

    @classmethod
    def from_defaults(cls, name, sampler=None, overrides=None,
                      normalize=None, batch_size=120, accumulate=1):
        """Get the config of a loss from its shipped defaults.

        ``batch_size`` is split into classes of ``per_class`` samples (2 for
        n-pairs batches). A batch holds at least 2 classes; small batches
        get fewer samples per class instead.
        """
        params = loss_params(name, overrides)
        defaults = LOSS_DEFAULTS[name]
        sampler = sampler or defaults["sampler"]
        per_class = 2 if sampler == "npairs" else defaults["per_class"]
        n_classes = max(batch_size // per_class, 2)
        if sampler != "npairs":
            per_class = min(per_class, max(batch_size // n_classes, 1))
        if "max_batch_classes" in defaults:
            n_classes = min(n_classes, defaults["max_batch_classes"])
        if normalize is None:
            normalize = defaults["normalize"]
        ret = cls(name, sampler, params, bool(normalize), n_classes,
                  per_class, accumulate)
        ret.validate()
        return ret

    def validate(self):
        check_compatible(self.name, self.sampler)
        if self.accumulate < 1:
            raise ConfigError("must be >= 1, got %r" % self.accumulate,
                              "accumulate")
        if self.n_classes < 1 or self.per_class < 1:
            raise ConfigError("batch needs >= 1 class and sample per class",
                              "batch_size")


@dataclass
class Schedule:
    """Number of steps and evaluation cadence of a run."""

    steps: int = 500
    eval_every: int = 100
    ks: tuple = RECALL_KS
    binarize: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("must be >= 0, got %r" % self.steps, "steps")
        if self.eval_every < 1:
            raise ConfigError("must be >= 1, got %r" % self.eval_every,
                              "eval_every")


@dataclass
class TrainState:
    """Everything that determines the rest of a training run."""

    encoder: Encoder
    loss: LossConfig
    optimizer: object
    trainable: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    rng: SamplerRng = None

    def parameters(self):
        """Get every trainable array by qualified name (shared, not copied)."""
        ret = {"encoder/" + k: v for k, v in self.encoder.params.items()}
        ret.update({"loss/" + k: v for k, v in self.trainable.items()})
        return ret


def init_state(spec, loss, opt, n_train_classes):
    """Get a fresh training state.

    :param spec: Encoder shape; ``spec.seed`` seeds the whole run
    :type spec: trainer.encoder.EncoderSpec
    :param loss: Loss and sampler
    :type loss: LossConfig
    :param opt: Optimizer hyperparameters
    :type opt: trainer.optimizers.OptimizerConfig
    :param n_train_classes: Number of training classes (labels 0..C-1)
    :type n_train_classes: int
    :rtype: TrainState
    :raise ConfigError: Loss and sampler are incompatible
    """
    loss.validate()
    root = SamplerRng(spec.seed)
    trainable = init_parameters(loss.name, loss.params, n_train_classes,
                                spec.output_dim,
                                root.spawn(PARAMETER_STREAM).generator)
    return TrainState(Encoder(spec), loss, make_optimizer(opt), trainable,
                      0, spec.seed, root.spawn(BATCH_STREAM))


def _batch_gradients(state, features, labels, plan):
    loss = state.loss
    outputs, cache = state.encoder.forward(features)
    batch = EmbeddingBatch(outputs, labels)
    plan = mine(loss.sampler, batch, plan, loss.params, loss.normalize,
                state.rng)
    result = evaluate_loss(loss.name, batch, plan, loss.params,
                           state.trainable, loss.normalize)
    grads = {"encoder/" + k: v for k, v in
             state.encoder.backward(cache, result.grad_embeddings).items()}
    grads.update({"loss/" + k: v for k, v in result.grad_params.items()})
    return result.value, grads


def compute_gradients(state, batches):
    """Get the loss and gradients averaged over one or more batches.

    Batches are weighted by their number of rows, so for losses averaged
    over rows the result equals that of the concatenated batch.

    :param batches: ``(features, labels, plan)`` triples
    :type batches: list[tuple]
    :rtype: tuple[float, dict[str, np.ndarray]]
    """
    total = sum(len(labels) for _, labels, _ in batches)
    value = 0.0
    grads = {}
    for features, labels, plan in batches:
        weight = len(labels) / total
        batch_value, batch_grads = _batch_gradients(state, features, labels,
                                                    plan)
        value += weight * batch_value
        for k, v in batch_grads.items():
            grads[k] = grads[k] + weight * v if k in grads else weight * v
    return value, grads


def apply_gradients(state, grads):
    state.optimizer.update(state.parameters(), grads)
    project_parameters(state.loss.name, state.trainable,
                       state.loss.normalize)
    state.step += 1


def _advance(state, batches):
    value, grads = compute_gradients(state, batches)
    if not np.isfinite(value):
        raise TrainingDivergence(state.step, state.loss.name, value)
    apply_gradients(state, grads)
    return value


def train_step(state, features, labels, plan=None):
    """Take one optimizer step on a given batch.

    :param state: State before the step, left unchanged
    :type state: TrainState
    :param features: Raw features of the batch
    :type features: np.ndarray
    :param labels: Training labels of the batch
    :type labels: np.ndarray
    :param plan: Plan recorded at composition, if the sampler needs one
    :type plan: batch_sampler.BatchPlan | None
    :return: State after the step and the loss before it
    :rtype: tuple[TrainState, float]
    :raise TrainingDivergence: The loss is not finite
    """
    ret = copy.deepcopy(state)
    value = _advance(ret, [(features, labels, plan)])
    return ret, value


def batch_classes(loss, index):
    """Get the classes per batch, clamped to the eligible classes.

    :raise ConfigError: Fewer than 2 classes can fill a batch
    """
    need = 2 if loss.sampler == "npairs" else loss.per_class
    eligible = sum(1 for ids in index.values() if len(ids) >= need)
    n_classes = min(loss.n_classes, eligible)
    if n_classes < 2:
        raise ConfigError("only %s training classes hold %s samples"
                          % (eligible, need), "batch_size")
    if n_classes < loss.n_classes:
        logger.info("Batch reduced to %s classes", n_classes)
    return n_classes


def next_batches(state, dataset, index, n_classes):
    """Compose the batches of the next update."""
    loss = state.loss
    ret = []
    for _ in range(loss.accumulate):
        ids, plan = compose(loss.name, loss.sampler, index, n_classes,
                            loss.per_class, loss.params, state.rng)
        ret.append((dataset.features[ids], dataset.labels[ids], plan))
    return ret


def advance(state, dataset, index, n_classes):
    """Compose and take one step in place, returning the loss."""
    return _advance(state, next_batches(state, dataset, index, n_classes))


def embed(state, features):
    """Get the evaluation embedding of ``features``."""
    outputs = state.encoder.embed(features)
    if state.loss.normalize:
        outputs = normalize_rows(outputs)[0]
    return outputs


def binarize(batch):
    """Get the 0/1 code of every row: bit set iff the coordinate is > 0.

    :type batch: core_math.EmbeddingBatch
    :rtype: np.ndarray
    """
    return (batch.vectors > 0.0).astype(np.uint8)


def evaluate_embeddings(vectors, labels, schedule, seed, step=0):
    """Get Recall@K and NMI of held out embeddings.

    NMI compares a k-means clustering (k = number of classes) with the
    classes. With ``schedule.binarize`` retrieval runs on sign codes under
    the Hamming distance.

    :rtype: clustering_eval.EvalReport
    """
    batch = EmbeddingBatch(vectors, labels)
    metric = "euclidean"
    index = batch
    if schedule.binarize:
        index = EmbeddingBatch(binarize(batch).astype(np.float64), labels)
        metric = "hamming"
    recall = recall_at_k(index, ks=schedule.ks, metric=metric,
                         workers=schedule.workers)
    n_clusters = np.unique(batch.labels).size
    generator = SamplerRng(seed, (KMEANS_STREAM, step)).generator
    _, assignment = kmeans2(batch.vectors, n_clusters, minit="++",
                            seed=generator)
    clusters = ClusterAssignment(assignment).canonical()
    if clusters.n_clusters < n_clusters:
        logger.debug("k-means left %s of %s clusters empty at step %s",
                     n_clusters - clusters.n_clusters, n_clusters, step)
    return EvalReport(recall, nmi(clusters.assignment, batch.labels),
                      batch.size, metric, step)


def evaluate(state, dataset, schedule):
    return evaluate_embeddings(embed(state, dataset.features), dataset.labels,
                               schedule, state.seed, state.step)


def train_run(state, train, test, schedule, history=None):
    """Train until ``schedule.steps`` and evaluate along the way.

    A state at step 0 is evaluated first; after that every multiple of
    ``eval_every`` and the last step are evaluated. A resumed state
    continues from its own step.

    :param state: Advanced in place
    :type state: TrainState
    :param train: Training classes
    :type train: data_parser.Dataset
    :param test: Held out classes
    :type test: data_parser.Dataset
    :type schedule: Schedule
    :param history: Appended to as reports are taken, so a caller keeps
        them when a step raises
    :type history: list | None
    :return: The state and the reports taken
    :rtype: tuple[TrainState, list[clustering_eval.EvalReport]]
    """
    history = [] if history is None else history
    if state.step == 0:
        history.append(evaluate(state, test, schedule))
    if state.step >= schedule.steps:
        return state, history
    index = class_index(train.labels)
    n_classes = batch_classes(state.loss, index)
    while state.step < schedule.steps:
        value = advance(state, train, index, n_classes)
        if state.step % schedule.eval_every == 0 \
                or state.step == schedule.steps:
            report = evaluate(state, test, schedule)
            logger.info("Step %s: %s loss %.5f, Recall@1 %.4f, NMI %.4f",
                        state.step, state.loss.name, value,
                        report.recall_at[min(report.recall_at)], report.nmi)
            history.append(report)
    return state, history
