"""Ensemble of encoders trained on random groupings of the classes.

Every member sees the training classes merged into random meta-classes,
learns a small embedding with the base loss, and the ensemble embedding
is the concatenation of the member embeddings.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from batch_sampler import SamplerRng, class_index
from errors import ConfigError
from trainer.train_loop import (LossConfig, advance, batch_classes, embed,
                                evaluate_embeddings, init_state)

logger = logging.getLogger(__name__)

MEMBER_STREAM = 7


@dataclass
class Ensemble:
    """Members, the meta-class of every class per member and the run
    seed evaluations are drawn from."""

    members: list
    groupings: list
    seed: int

    @property
    def step(self):
        return self.members[0].step

    @property
    def dim(self):
        return sum(m.encoder.spec.output_dim for m in self.members)

    def embed(self, features):
        return np.concatenate([embed(m, features) for m in self.members],
                              axis=1)


def meta_class_grouping(n_classes, n_meta, rng):
    """Get the meta-class id of every class.

    The classes are shuffled and split into ``min(n_meta, n_classes)``
    meta-classes whose sizes differ by at most one.

    :param n_classes: Number of training classes
    :type n_classes: int
    :param n_meta: Number of meta-classes D
    :type n_meta: int
    :type rng: batch_sampler.SamplerRng
    :rtype: np.ndarray
    :raise ConfigError: Fewer than 2 meta-classes are possible
    """
    n_meta = min(n_meta, n_classes)
    if n_meta < 2:
        raise ConfigError("need >= 2 meta-classes, %s classes available"
                          % n_classes, "dims")
    ret = np.empty(n_classes, dtype=np.int64)
    perm = rng.generator.permutation(n_classes)
    for meta, classes in enumerate(np.array_split(perm, n_meta)):
        ret[classes] = meta
    return ret


def member_seed(seed, member):
    return int(np.random.SeedSequence(
        seed, spawn_key=(MEMBER_STREAM, member)).generate_state(1)[0])


def init_ensemble(train, n_models, dims, base_loss, spec, opt):
    """Get the untrained members of an ensemble and their groupings.

    With ``n_models == 1`` the single member keeps the true classes and
    the run seed, so training it equals a plain ``train_run``.

    :param train: Training classes
    :type train: data_parser.Dataset
    :param n_models: Number of members L
    :type n_models: int
    :param dims: Embedding size of every member
    :type dims: int
    :param base_loss: Loss every member trains with
    :type base_loss: trainer.train_loop.LossConfig
    :param spec: Encoder of a member; ``output_dim`` is replaced by dims
    :type spec: trainer.encoder.EncoderSpec
    :param opt: Optimizer of every member
    :type opt: trainer.optimizers.OptimizerConfig
    :rtype: Ensemble
    :raise ConfigError: No members or an ensemble base loss
    """
    if n_models < 1:
        raise ConfigError("must be >= 1, got %r" % n_models, "n_models")
    if not isinstance(base_loss, LossConfig) or base_loss.name == "dreml":
        raise ConfigError("base loss must be a single-model loss",
                          "base_loss")
    root = SamplerRng(spec.seed)
    n_classes = train.n_classes
    members, groupings = [], []
    for m in range(n_models):
        if n_models == 1:
            grouping = np.arange(n_classes)
            seed = spec.seed
        else:
            grouping = meta_class_grouping(n_classes, dims,
                                           root.spawn(MEMBER_STREAM, m))
            seed = member_seed(spec.seed, m)
        n_meta = int(grouping.max()) + 1
        members.append(init_state(replace(spec, output_dim=dims, seed=seed),
                                  replace(base_loss), opt, n_meta))
        groupings.append(grouping)
    return Ensemble(members, groupings, spec.seed)


def ensemble_run(ensemble, train, test, schedule, history=None):
    """Train every member until ``schedule.steps`` and evaluate the
    concatenated embedding along the way.

    Members step together. Untrained members are evaluated first; after
    that every multiple of ``eval_every`` and the last step are.

    :param ensemble: Advanced in place
    :type ensemble: Ensemble
    :type train: data_parser.Dataset
    :type test: data_parser.Dataset
    :type schedule: trainer.train_loop.Schedule
    :param history: Appended to as reports are taken
    :type history: list | None
    :rtype: list[clustering_eval.EvalReport]
    """
    members = ensemble.members
    datasets, plans = [], []
    for state, grouping in zip(members, ensemble.groupings):
        member_data = replace(train, labels=grouping[train.labels])
        index = class_index(member_data.labels)
        datasets.append(member_data)
        plans.append((index, batch_classes(state.loss, index)))

    def evaluate(step):
        return evaluate_embeddings(ensemble.embed(test.features), test.labels,
                                   schedule, ensemble.seed, step)

    def step_member(m):
        index, n_batch_classes = plans[m]
        return advance(members[m], datasets[m], index, n_batch_classes)

    history = [] if history is None else history
    if ensemble.step == 0:
        history.append(evaluate(0))
    workers = max(1, min(schedule.workers, len(members)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for step in range(ensemble.step + 1, schedule.steps + 1):
            losses = list(pool.map(step_member, range(len(members))))
            if step % schedule.eval_every == 0 or step == schedule.steps:
                report = evaluate(step)
                logger.info("Step %s: ensemble of %s, mean loss %.5f, "
                            "Recall@1 %.4f", step, len(members),
                            float(np.mean(losses)),
                            report.recall_at[min(report.recall_at)])
                history.append(report)
    return history


def dreml_train(train, test, n_models, dims, base_loss, spec, opt, schedule,
                history=None):
    """Train an ensemble and evaluate the concatenated embedding.

    See ``init_ensemble`` for the parameters.

    :return: The ensemble and its reports
    :rtype: tuple[Ensemble, list[clustering_eval.EvalReport]]
    """
    ensemble = init_ensemble(train, n_models, dims, base_loss, spec, opt)
    return ensemble, ensemble_run(ensemble, train, test, schedule, history)
