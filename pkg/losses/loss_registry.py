"""Name based access to the losses.

Maps every single-model loss name to its function, its default
hyperparameters (``assets/loss_defaults.json``), the samplers it accepts
and the trainable arrays it owns (proxies or per-class margins).
"""

import numpy as np

from batch_sampler import (all_pairs, class_balanced_compose,
                           distance_weighted_pairs, episodic_compose,
                           npairs_compose, semi_hard_mine)
from core_math import (DistanceMatrix, distance_values, embedding_view,
                       normalize_rows)
from definitions import LOSS_DEFAULTS, SINGLE_MODEL_LOSS_NAMES
from errors import ConfigError
from losses.cluster_losses import struct_clust_loss
from losses.index_sets import (AngularParams, EpisodeSpec, MarginLossParams,
                               RankedListParams, StructClustParams)
from losses.pair_losses import (lifted_struct_loss, margin_loss,
                                ranked_list_loss, triplet_loss)
from losses.proxy_losses import (ProxyBank, proxy_nca_loss,
                                 proxy_softmax_loss, proxy_triplet_loss)
from losses.softmax_losses import angular_loss, npairs_loss, prototypical_loss

PROXY_LOSSES = ("proxy-triplet", "proxy-nca", "proxy-softmax")

# Losses that need same-class pairs inside a class balanced batch
NEEDS_POSITIVES = ("triplet-semihard", "lifted", "margin", "rll")

# Hyperparameters accepted on top of the shipped defaults
EXTRA_PARAMS = {"proxy-nca": ("temperature",)}


def check_loss_name(name):
    if name not in SINGLE_MODEL_LOSS_NAMES:
        raise ConfigError("unknown loss %r, expected one of %s"
                          % (name, ", ".join(SINGLE_MODEL_LOSS_NAMES)),
                          "loss")


def loss_params(name, overrides=None):
    """Get the hyperparameters of a loss, defaults updated by overrides.

    :param name: Loss name
    :type name: str
    :param overrides: Hyperparameter name to value
    :type overrides: dict | None
    :rtype: dict
    :raise ConfigError: Unknown loss or hyperparameter
    """
    check_loss_name(name)
    ret = dict(LOSS_DEFAULTS[name]["params"])
    allowed = set(ret) | set(EXTRA_PARAMS.get(name, ()))
    for key, value in (overrides or {}).items():
        if key not in allowed:
            raise ConfigError("%s takes no hyperparameter %r (known: %s)"
                              % (name, key, ", ".join(sorted(allowed))),
                              "params")
        ret[key] = value
    return ret


def check_compatible(name, sampler):
    """Refuse a sampler the loss cannot consume.

    :raise ConfigError: Incompatible pair
    """
    check_loss_name(name)
    allowed = LOSS_DEFAULTS[name]["samplers"]
    if sampler not in allowed:
        raise ConfigError("loss %s cannot use sampler %r (compatible: %s)"
                          % (name, sampler, ", ".join(allowed)), "sampler")


def proxy_bank(name, params, proxies, normalize):
    if name == "proxy-nca" and params.get("temperature") is not None:
        return ProxyBank.from_temperature(proxies, params["temperature"],
                                          normalize=normalize)
    return ProxyBank(proxies, scale=float(params.get("scale", 1.0)),
                     normalize=normalize)


def init_parameters(name, params, n_classes, dim, generator):
    """Get the trainable arrays a loss owns, freshly initialized.

    Proxies are drawn uniformly on the unit sphere and margins start at
    ``beta_init``.

    :param generator: Source of randomness
    :type generator: np.random.Generator
    :rtype: dict[str, np.ndarray]
    """
    if name in PROXY_LOSSES:
        bank = ProxyBank.random(n_classes, dim, generator)
        return {"proxies": bank.proxies}
    if name == "margin" and params["trainable_beta"]:
        return {"beta": np.full(n_classes, float(params["beta_init"]))}
    return {}


def project_parameters(name, trainable, normalize):
    """Scale normalized proxy rows back to unit norm, in place."""
    if name in PROXY_LOSSES and normalize:
        proxies = trainable["proxies"]
        proxies[...] = normalize_rows(proxies)[0]


def episode_spec(params):
    return EpisodeSpec(params.get("classes_per_episode", 4),
                       params.get("support_per_class", 2),
                       params.get("query_per_class", 2))


def compose(name, sampler, index, n_classes, per_class, params, rng):
    """Pick the sample ids of the next batch.

    :param index: Class id to sample ids
    :type index: dict[int, np.ndarray]
    :return: Sample ids and, for n-pairs and episodic samplers, the plan
    :rtype: tuple[list[int], batch_sampler.BatchPlan | None]
    """
    if sampler == "npairs":
        return npairs_compose(index, n_classes, rng)
    if sampler == "episodic":
        return episodic_compose(index, episode_spec(params),
                                params.get("episodes_per_batch", 1), rng)
    ids = class_balanced_compose(index, n_classes, per_class, rng,
                                 require_positives=name in NEEDS_POSITIVES)
    return ids, None


def mine(sampler, batch, plan, params, normalize, rng):
    """Get the plan of a composed batch from its current embeddings.

    :param batch: Embeddings of the composed batch
    :type batch: core_math.EmbeddingBatch
    :param plan: Plan recorded by the composer, if any
    :type plan: batch_sampler.BatchPlan | None
    :rtype: batch_sampler.BatchPlan | None
    """
    if sampler == "semihard":
        x, _ = embedding_view(batch, normalize)
        dist = DistanceMatrix(distance_values(x, "squared-euclidean"),
                              "squared-euclidean")
        return semi_hard_mine(batch, dist, params.get("margin", 0.2))
    if sampler == "all-pairs":
        return all_pairs(batch)
    if sampler == "distance-weighted":
        x, _ = embedding_view(batch, True)
        dist = DistanceMatrix(distance_values(x, "euclidean"), "euclidean")
        clip = (float(params.get("clip_min", 0.0)), None)
        return distance_weighted_pairs(
            batch, dist, rng, clip, float(params.get("max_weight_ratio", 1e4)))
    return plan


def evaluate_loss(name, batch, plan, params, trainable, normalize):
    """Evaluate a loss by name.

    :param name: Single-model loss name
    :type name: str
    :param batch: Embeddings
    :type batch: core_math.EmbeddingBatch
    :param plan: Plan from ``mine``, ``None`` for class balanced losses
    :type plan: batch_sampler.BatchPlan | None
    :param params: Hyperparameters from ``loss_params``
    :type params: dict
    :param trainable: Trainable arrays from ``init_parameters``
    :type trainable: dict[str, np.ndarray]
    :param normalize: Work on L2-normalized embeddings
    :type normalize: bool
    :rtype: core_math.DifferentiableResult
    """
    if name == "triplet-semihard":
        return triplet_loss(batch, plan.triplets, params["margin"],
                            normalize=normalize)
    if name == "lifted":
        return lifted_struct_loss(batch, plan.pairs, params["margin"],
                                  normalize=normalize)
    if name == "npairs":
        return npairs_loss(batch, plan, params["l2_reg"],
                           params["reverse_pairs"], normalize=normalize)
    if name == "angular":
        return angular_loss(batch, plan,
                            AngularParams(params["alpha_degrees"]),
                            params["combine_npairs"],
                            params["npairs_weight"], normalize=normalize)
    if name == "margin":
        if "beta" in trainable:
            margins = MarginLossParams(trainable["beta"], params["alpha"],
                                       True)
        else:
            margins = MarginLossParams.for_classes(
                int(batch.labels.max()) + 1, params["beta_init"],
                params["alpha"], trainable_beta=False)
        return margin_loss(batch, plan.pairs, margins, normalize=normalize)
    if name == "rll":
        ranked = RankedListParams(params["alpha"], params["m"],
                                  params["lambda"], params["temperature"])
        return ranked_list_loss(batch, ranked, normalize=normalize)
    if name == "struct-clust":
        return struct_clust_loss(
            batch, StructClustParams(params["gamma"], params["inference"]),
            normalize=normalize)
    if name == "proto":
        return prototypical_loss(batch, plan, normalize=normalize)

    bank = proxy_bank(name, params, trainable["proxies"], normalize)
    if name == "proxy-nca":
        return proxy_nca_loss(batch, bank, params["include_positive"])
    if name == "proxy-triplet":
        return proxy_triplet_loss(batch, bank, params["margin"])
    if name == "proxy-softmax":
        return proxy_softmax_loss(batch, bank, params["temperature"])
    check_loss_name(name)
