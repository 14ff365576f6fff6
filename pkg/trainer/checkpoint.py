"""Saving and restoring a training state.

A checkpoint is one ``.npz`` archive. Arrays are stored under
``encoder/<name>``, ``trainable/<name>`` and ``optimizer/<name>``; the
entry ``metadata`` holds a JSON document with the format version, the
step, the seed, the encoder, loss and optimizer configs, the optimizer
step counter, the batch stream state and the evaluation history so far.
An ensemble archive stores every member under ``member<m>/`` and lists
their metadata under ``members``.
"""

import json
import logging
import os
import tempfile
from dataclasses import asdict

import numpy as np

from batch_sampler import SamplerRng
from clustering_eval import EvalReport
from definitions import CHECKPOINT_FORMAT_VERSION
from errors import ConfigError
from trainer.encoder import Encoder, EncoderSpec
from trainer.optimizers import OptimizerConfig, make_optimizer
from trainer.train_loop import LossConfig, TrainState

logger = logging.getLogger(__name__)


def atomic_write(path, write):
    """Write a file through a temporary sibling renamed over ``path``.

    :param path: Destination
    :type path: str
    :param write: Called with a binary file object
    :type write: callable
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fp:
            write(fp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _state_arrays(state, prefix=""):
    arrays = {prefix + "encoder/" + k: v
              for k, v in state.encoder.params.items()}
    arrays.update({prefix + "trainable/" + k: v
                   for k, v in state.trainable.items()})
    arrays.update({prefix + "optimizer/" + k: v
                   for k, v in state.optimizer.state_arrays().items()})
    return arrays


def _state_metadata(state):
    return {
        "step": state.step,
        "seed": state.seed,
        "encoder": asdict(state.encoder.spec),
        "loss": asdict(state.loss),
        "optimizer": asdict(state.optimizer.config),
        "optimizer_step": state.optimizer.t,
        "rng": {"seed": state.rng.seed, "key": list(state.rng.key),
                "state": state.rng.get_state()},
    }


def _write(path, arrays, metadata, history):
    metadata = dict(metadata, format_version=CHECKPOINT_FORMAT_VERSION,
                    history=[e.to_dict() for e in history])
    arrays["metadata"] = np.array(json.dumps(metadata, sort_keys=True))
    atomic_write(path, lambda fp: np.savez(fp, **arrays))


def save_checkpoint(path, state, history=()):
    """Write ``state`` and the reports taken so far to ``path``.

    :type path: str
    :type state: trainer.train_loop.TrainState
    :param history: Reports of the run so far
    :type history: list[clustering_eval.EvalReport]
    """
    _write(path, _state_arrays(state), _state_metadata(state), history)
    logger.info("Saved checkpoint at step %s to %s", state.step, path)


def save_ensemble_checkpoint(path, members, history=()):
    """Write every member state of an ensemble to one archive.

    :type path: str
    :type members: list[trainer.train_loop.TrainState]
    :type history: list[clustering_eval.EvalReport]
    """
    arrays = {}
    for m, state in enumerate(members):
        arrays.update(_state_arrays(state, "member%s/" % m))
    _write(path, arrays, {"members": [_state_metadata(e) for e in members]},
           history)
    logger.info("Saved %s ensemble members at step %s to %s", len(members),
                members[0].step, path)


def _section(arrays, prefix):
    return {k[len(prefix):]: np.array(arrays[k]) for k in arrays.files
            if k.startswith(prefix)}


def _restore(metadata, arrays, prefix=""):
    spec = EncoderSpec(**metadata["encoder"])
    optimizer = make_optimizer(OptimizerConfig(**metadata["optimizer"]))
    optimizer.load_arrays(metadata["optimizer_step"],
                          _section(arrays, prefix + "optimizer/"))
    rng = SamplerRng(metadata["rng"]["seed"], metadata["rng"]["key"])
    rng.set_state(metadata["rng"]["state"])
    return TrainState(Encoder(spec, _section(arrays, prefix + "encoder/")),
                      LossConfig(**metadata["loss"]), optimizer,
                      _section(arrays, prefix + "trainable/"),
                      metadata["step"], metadata["seed"], rng)


def _read(path, ensemble):
    with np.load(path, allow_pickle=False) as arrays:
        metadata = json.loads(str(arrays["metadata"]))
        version = metadata.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError("checkpoint format %r, expected %r"
                              % (version, CHECKPOINT_FORMAT_VERSION),
                              "checkpoint")
        if ("members" in metadata) != ensemble:
            raise ConfigError("%s holds %s" % (
                path, "an ensemble" if "members" in metadata
                else "a single model"), "checkpoint")
        if ensemble:
            states = [_restore(e, arrays, "member%s/" % m)
                      for m, e in enumerate(metadata["members"])]
        else:
            states = _restore(metadata, arrays)
    return states, [EvalReport.from_dict(e) for e in metadata["history"]]


def load_checkpoint(path):
    """Read a checkpoint written by ``save_checkpoint``.

    :type path: str
    :return: The state and the reports taken before it was saved
    :rtype: tuple[trainer.train_loop.TrainState, list[EvalReport]]
    :raise ConfigError: Unknown format version or an ensemble archive
    """
    return _read(path, False)


def load_ensemble_checkpoint(path):
    """Read a checkpoint written by ``save_ensemble_checkpoint``.

    :rtype: tuple[list[trainer.train_loop.TrainState], list[EvalReport]]
    :raise ConfigError: Unknown format version or a single model archive
    """
    return _read(path, True)
