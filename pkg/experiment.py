"""Experiment configuration and the execution of runs, sweeps and grids.

Settings are layered: code defaults, then the per-loss defaults shipped in
``assets/loss_defaults.json``, then the ini file, then command line flags.
Fields the per-loss defaults can supply stay ``None`` until resolved.
"""

import configparser
import itertools
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from data_parser import (SplitSpec, SyntheticSpec, gen_synthetic,
                         load_feature_csv, split_disjoint_classes)
from definitions import LOSS_DEFAULTS, LOSS_NAMES, RECALL_KS
from errors import BenchError, ConfigError, TrainingDivergence
from trainer.checkpoint import (load_checkpoint, load_ensemble_checkpoint,
                                save_checkpoint, save_ensemble_checkpoint)
from trainer.encoder import ENCODER_KINDS, EncoderSpec
from trainer.ensemble import dreml_train, ensemble_run, init_ensemble
from trainer.optimizers import OptimizerConfig
from trainer.train_loop import LossConfig, Schedule, init_state, train_run

logger = logging.getLogger(__name__)

DEFAULT_EMBEDDING_DIM = 64
DEFAULT_HIDDEN_DIMS = (64,)
SWEEP_AXES = ("embedding_size", "batch_size", "loss", "encoder")
# Spawn key of the per-cell seeds of a reseeded sweep
SWEEP_STREAM = 11

OPTIMIZER_FIELDS = tuple(f.name for f in fields(OptimizerConfig))
SYNTHETIC_FIELDS = tuple(f.name for f in fields(SyntheticSpec))
SPLIT_FIELDS = tuple(f.name for f in fields(SplitSpec))

# Sweep axis and grid key aliases of config fields
FIELD_ALIASES = {"embedding_size": "embedding_dim"}


def parse_value(text):
    """Read a command line or ini value: JSON literal, else a string.

    ``"0.1"`` gives a float, ``"true"`` a bool, ``"1,2"`` a tuple of
    numbers and ``"proxy-nca"`` stays a string.
    """
    text = str(text).strip()
    if "," in text and not text.startswith(("[", "{")):
        return tuple(parse_value(e) for e in text.split(",") if e.strip())
    try:
        ret = json.loads(text)
    except ValueError:
        lowered = text.lower()
        if lowered in configparser.ConfigParser.BOOLEAN_STATES:
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        return text
    return tuple(ret) if isinstance(ret, list) else ret


def parse_assignments(items, field_name="params"):
    """Get ``{"k": value}`` from ``["k=v", ...]``.

    :raise ConfigError: An item without ``=``
    """
    ret = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError("expected key=value, got %r" % item, field_name)
        ret[key.strip()] = parse_value(value)
    return ret


def _as_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return (value,)


@dataclass
class ExperimentConfig:
    """Everything one run depends on.

    ``params`` overrides the loss hyperparameters, ``optimizer``,
    ``synthetic`` and ``split`` hold the fields of ``OptimizerConfig``,
    ``SyntheticSpec`` and ``SplitSpec`` that differ from their defaults.
    ``dataset`` is a feature CSV; without one the synthetic data is used.
    """

    loss: str = "proxy-nca"
    sampler: str = None
    params: dict = field(default_factory=dict)
    encoder: str = "linear"
    hidden_dims: tuple = ()
    embedding_dim: int = None
    normalize: bool = None
    optimizer: dict = field(default_factory=dict)
    dataset: str = None
    synthetic: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    batch_size: int = 120
    accumulate: int = 1
    steps: int = 500
    eval_every: int = 100
    binarize: bool = None
    workers: int = 1
    seed: int = 0
    out: str = None

    @classmethod
    def from_sources(cls, ini_path=None, overrides=None):
        """Get a config from an ini file and command line overrides.

        :param ini_path: ini file, skipped when ``None``
        :type ini_path: str | None
        :param overrides: Field name to value; ``None`` values are ignored
        :type overrides: dict | None
        :rtype: ExperimentConfig
        :raise ConfigError: Missing file, unknown section or key
        """
        ret = cls()
        if ini_path is not None:
            ret = ret.updated(**read_ini(ini_path, (overrides or {}).get(
                "loss")))
        return ret.updated(**(overrides or {}))

    def updated(self, **values):
        """Get a copy with fields set; dict fields are merged key by key."""
        names = {f.name for f in fields(self)}
        changes = {}
        for key, value in values.items():
            if key not in names:
                raise ConfigError("unknown setting", key)
            if value is None:
                continue
            current = getattr(self, key)
            if isinstance(current, dict):
                value = dict(current, **value)
            elif key == "hidden_dims":
                value = tuple(int(e) for e in _as_tuple(value))
            changes[key] = value
        return replace(self, **changes)

    def with_value(self, key, value):
        """Set one sweep or grid value on the record that holds it.

        Keys that are not config fields, optimizer or synthetic data fields
        are loss hyperparameters.
        """
        key = FIELD_ALIASES.get(key, key)
        if key == "loss" and value != self.loss:
            return replace(self, loss=value, params={}, sampler=None)
        if key in {f.name for f in fields(self)}:
            return self.updated(**{key: value})
        if key in OPTIMIZER_FIELDS:
            return self.updated(optimizer={key: value})
        if key in SYNTHETIC_FIELDS:
            return self.updated(synthetic={key: value})
        return self.updated(params={key: value})

    @property
    def loss_defaults(self):
        if self.loss not in LOSS_DEFAULTS:
            raise ConfigError("unknown loss %r, expected one of %s"
                              % (self.loss, ", ".join(LOSS_NAMES)), "loss")
        return LOSS_DEFAULTS[self.loss]

    @property
    def is_ensemble(self):
        return self.loss == "dreml"

    def dreml_params(self):
        ret = dict(LOSS_DEFAULTS["dreml"]["params"])
        for key, value in self.params.items():
            if key not in ret:
                raise ConfigError("dreml takes no hyperparameter %r (known: "
                                  "%s)" % (key, ", ".join(sorted(ret))),
                                  "params")
            ret[key] = value
        if self.embedding_dim is not None:
            ret["dims"] = self.embedding_dim
        for key in ("n_models", "dims"):
            if int(ret[key]) < 1:
                raise ConfigError("must be >= 1, got %r" % ret[key], key)
        return ret

    def loss_config(self):
        """Get the loss the encoder (every member, for dreml) trains with.

        :rtype: trainer.train_loop.LossConfig
        """
        if self.is_ensemble:
            return LossConfig.from_defaults(
                self.dreml_params()["base_loss"], self.sampler, None,
                self.normalize, self.batch_size, self.accumulate)
        self.loss_defaults
        return LossConfig.from_defaults(self.loss, self.sampler, self.params,
                                        self.normalize, self.batch_size,
                                        self.accumulate)

    def output_dim(self, input_dim):
        """Get the embedding size of the encoder (of a member, for dreml)."""
        if self.encoder == "identity":
            return input_dim
        if self.is_ensemble:
            return int(self.dreml_params()["dims"])
        if self.embedding_dim is not None:
            return int(self.embedding_dim)
        return int(self.loss_defaults.get("embedding_dim",
                                          DEFAULT_EMBEDDING_DIM))

    def encoder_spec(self, input_dim):
        hidden = ()
        if self.encoder == "mlp":
            hidden = self.hidden_dims or DEFAULT_HIDDEN_DIMS
        return EncoderSpec(self.encoder, input_dim, self.output_dim(input_dim),
                           hidden, False, self.seed)

    def optimizer_config(self):
        unknown = set(self.optimizer) - set(OPTIMIZER_FIELDS)
        if unknown:
            raise ConfigError("unknown optimizer settings %s"
                              % ", ".join(sorted(unknown)), "optimizer")
        values = dict(self.optimizer)
        values.setdefault("kind", self.loss_defaults["optimizer"])
        return OptimizerConfig(**values)

    def synthetic_spec(self):
        unknown = set(self.synthetic) - set(SYNTHETIC_FIELDS)
        if unknown:
            raise ConfigError("unknown settings %s"
                              % ", ".join(sorted(unknown)), "synthetic")
        return SyntheticSpec(**dict({"seed": self.seed}, **self.synthetic))

    def split_spec(self):
        unknown = set(self.split) - set(SPLIT_FIELDS)
        if unknown:
            raise ConfigError("unknown settings %s"
                              % ", ".join(sorted(unknown)), "split")
        values = dict(self.split)
        for key in ("train_classes", "test_classes"):
            if key in values:
                values[key] = tuple(int(e) for e in _as_tuple(values[key]))
        return SplitSpec(**values)

    def schedule(self):
        binarize = self.binarize
        if binarize is None:
            binarize = self.loss_defaults.get("binarize", False)
        if self.workers < 1:
            raise ConfigError("must be >= 1, got %r" % self.workers,
                              "workers")
        return Schedule(self.steps, self.eval_every, RECALL_KS,
                        bool(binarize), self.workers)

    def validate(self):
        """Check every setting before anything runs.

        :return: ``self``
        :raise ConfigError: First invalid setting, with its field name
        """
        self.loss_defaults
        if self.batch_size < 2:
            raise ConfigError("must be >= 2, got %r" % self.batch_size,
                              "batch_size")
        if self.embedding_dim is not None and self.embedding_dim < 1:
            raise ConfigError("must be >= 1, got %r" % self.embedding_dim,
                              "embedding_dim")
        if self.encoder not in ENCODER_KINDS:
            raise ConfigError("unknown encoder %r, expected one of %s"
                              % (self.encoder, ", ".join(ENCODER_KINDS)),
                              "encoder")
        self.loss_config()
        self.optimizer_config()
        self.schedule()
        self.split_spec()
        if self.dataset is None:
            self.synthetic_spec()
        return self

    def load_data(self):
        """Get the training and held out classes.

        :rtype: tuple[data_parser.Dataset, data_parser.Dataset]
        :raise ConfigError: Unreadable dataset or bad split
        """
        if self.dataset is not None:
            if not os.path.isfile(self.dataset):
                raise ConfigError("no such file %r" % self.dataset, "dataset")
            ds = load_feature_csv(self.dataset)
        else:
            ds = gen_synthetic(self.synthetic_spec())
        return split_disjoint_classes(ds, self.split_spec())

    def to_dict(self, input_dim=None):
        """Get the JSON echo of the config and of what it resolved to.

        ``out`` is left out so that reports of identical runs written to
        different files are identical.
        """
        ret = {k: v for k, v in asdict(self).items() if k != "out"}
        loss = self.loss_config()
        resolved = {
            "loss": asdict(loss),
            "optimizer": asdict(self.optimizer_config()),
            "binarize": self.schedule().binarize,
            "ks": list(RECALL_KS),
        }
        if self.is_ensemble:
            resolved["dreml"] = self.dreml_params()
        if input_dim is not None:
            resolved["encoder"] = asdict(self.encoder_spec(input_dim))
        ret["resolved"] = resolved
        return json.loads(json.dumps(ret))


def _ini_section(config, section):
    return {k: v for k, v in config.items(section) if v.strip() != ""}


# ini section to the config fields it may set; ``None`` routes the whole
# section into the dict field of the same name
INI_SECTIONS = {
    "experiment": ("loss", "sampler", "seed", "batch_size", "accumulate",
                   "embedding_dim", "normalize", "binarize", "dataset", "out"),
    "encoder": ("kind", "hidden_dims"),
    "schedule": ("steps", "eval_every", "workers"),
    "optimizer": None,
    "synthetic": None,
    "split": None,
}


def read_ini(path, loss=None):
    """Get config field values from an ini file.

    Sections ``[params.<loss>]`` set hyperparameters of that loss only,
    applied when it is the loss being run (``loss``, or the ini's own).

    :param path: ini file
    :type path: str
    :param loss: Loss chosen on the command line, if any
    :type loss: str | None
    :rtype: dict
    :raise ConfigError: Missing file, unknown section or key
    """
    config = configparser.ConfigParser(interpolation=None)
    if not config.read(path):
        raise ConfigError("cannot read %r" % path, "config")
    ret = {}
    loss_params = {}
    for section in config.sections():
        values = {k: parse_value(v)
                  for k, v in _ini_section(config, section).items()}
        if section.startswith("params."):
            loss_params[section[len("params."):]] = values
            continue
        if section not in INI_SECTIONS:
            raise ConfigError("unknown section [%s]" % section, "config")
        allowed = INI_SECTIONS[section]
        if allowed is None:
            ret[section] = values
            continue
        for key, value in values.items():
            if key not in allowed:
                raise ConfigError("unknown key %r in [%s]" % (key, section),
                                  "config")
            ret["encoder" if key == "kind" else key] = value
    for key in ("dataset", "out", "sampler", "loss", "encoder"):
        if key in ret:
            ret[key] = str(ret[key])
    chosen = loss or ret.get("loss", ExperimentConfig.loss)
    if chosen in loss_params:
        ret["params"] = loss_params[chosen]
    return ret


@dataclass
class RunResult:
    """Outcome of one run: its reports, status and optional timing."""

    config: dict
    history: list
    seed: int
    status: str = "ok"
    error: str = None
    wall_time_seconds: float = None

    @property
    def final(self):
        return self.history[-1] if self.history else None


def checkpoint_steps(step, schedule):
    """Get the steps a checkpointed run stops at to save."""
    ret = [s for s in range(step + 1, schedule.steps + 1)
           if s % schedule.eval_every == 0 or s == schedule.steps]
    return ret or [schedule.steps]


def _same_setup(state, fresh):
    return state.loss == fresh.loss \
        and state.encoder.spec == fresh.encoder.spec \
        and state.optimizer.config == fresh.optimizer.config


def _resume(path, config, input_dim):
    state, previous = load_checkpoint(path)
    if state.loss != config.loss_config() \
            or state.encoder.spec != config.encoder_spec(input_dim) \
            or state.optimizer.config != config.optimizer_config():
        raise ConfigError("%s was written by a different experiment" % path,
                          "checkpoint")
    logger.info("Resumed from %s at step %s", path, state.step)
    return state, previous


def _resume_ensemble(path, ensemble):
    members, previous = load_ensemble_checkpoint(path)
    if len(members) != len(ensemble.members) \
            or not all(_same_setup(a, b)
                       for a, b in zip(members, ensemble.members)):
        raise ConfigError("%s was written by a different experiment" % path,
                          "checkpoint")
    ensemble.members[:] = members
    logger.info("Resumed %s ensemble members from %s at step %s",
                len(members), path, ensemble.step)
    return previous


def _run_single(config, train, test, history, checkpoint):
    schedule = config.schedule()
    if checkpoint is not None and os.path.exists(checkpoint):
        state, previous = _resume(checkpoint, config, train.input_dim)
        history.extend(previous)
    else:
        state = init_state(config.encoder_spec(train.input_dim),
                           config.loss_config(), config.optimizer_config(),
                           train.n_classes)
    if checkpoint is None:
        train_run(state, train, test, schedule, history)
        return
    for target in checkpoint_steps(state.step, schedule):
        train_run(state, train, test, replace(schedule, steps=target),
                  history)
        save_checkpoint(checkpoint, state, history)


def _run_ensemble(config, train, test, history, checkpoint):
    params = config.dreml_params()
    schedule = config.schedule()
    setup = (int(params["n_models"]), int(params["dims"]),
             config.loss_config(), config.encoder_spec(train.input_dim),
             config.optimizer_config())
    if checkpoint is None:
        dreml_train(train, test, *setup, schedule, history)
        return
    ensemble = init_ensemble(train, *setup)
    if os.path.exists(checkpoint):
        history.extend(_resume_ensemble(checkpoint, ensemble))
    for target in checkpoint_steps(ensemble.step, schedule):
        ensemble_run(ensemble, train, test, replace(schedule, steps=target),
                     history)
        save_ensemble_checkpoint(checkpoint, ensemble.members, history)


def run_experiment(config, checkpoint=None, timing=False):
    """Train and evaluate one configuration.

    A diverging run is not an exception here: the result carries status
    ``diverged``, the error and the reports taken before it.

    :param config: Experiment to run
    :type config: ExperimentConfig
    :param checkpoint: Checkpoint file, resumed from when it exists and
        rewritten at every evaluation
    :type checkpoint: str | None
    :param timing: Record the wall time of the run
    :type timing: bool
    :rtype: RunResult
    :raise ConfigError: Invalid config
    """
    config.validate()
    train, test = config.load_data()
    echo = config.to_dict(train.input_dim)
    started = time.perf_counter()
    history = []
    ret = RunResult(echo, history, config.seed)
    try:
        if config.is_ensemble:
            _run_ensemble(config, train, test, history, checkpoint)
        else:
            _run_single(config, train, test, history, checkpoint)
    except TrainingDivergence as e:
        logger.error("Run stopped: %s", e)
        ret.status = "diverged"
        ret.error = str(e)
    if timing:
        ret.wall_time_seconds = time.perf_counter() - started
    return ret


def cell_seed(seed, cell):
    return int(np.random.SeedSequence(
        seed, spawn_key=(SWEEP_STREAM, cell)).generate_state(1)[0])


@dataclass
class SweepConfig:
    """One run per axis value and loss.

    :param base: Settings shared by every cell
    :type base: ExperimentConfig
    :param axis: ``embedding_size``, ``batch_size``, ``loss`` or ``encoder``
    :type axis: str
    :param values: Axis values
    :type values: list
    :param losses: Losses run at every value; the base loss when empty.
        Ignored on the ``loss`` axis.
    :type losses: tuple
    :param reseed: Give every cell its own seed derived from the base seed
    :type reseed: bool
    """

    base: ExperimentConfig
    axis: str
    values: list
    losses: tuple = ()
    reseed: bool = False

    def validate(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError("unknown axis %r, expected one of %s"
                              % (self.axis, ", ".join(SWEEP_AXES)), "axis")
        if not self.values:
            raise ConfigError("no values to sweep", "values")
        if self.axis in ("batch_size", "embedding_size"):
            floor = 2 if self.axis == "batch_size" else 1
            for value in self.values:
                if not isinstance(value, int) or value < floor:
                    raise ConfigError("%s values must be integers >= %s, "
                                      "got %r" % (self.axis, floor, value),
                                      "values")
        if self.axis == "encoder":
            bad = [e for e in self.values if e not in ENCODER_KINDS]
            if bad:
                raise ConfigError("unknown encoders %s" % bad, "values")
        for loss in self.cell_losses():
            if loss not in LOSS_DEFAULTS:
                raise ConfigError("unknown loss %r" % loss, "loss")
        return self

    def cell_losses(self):
        if self.axis == "loss":
            return tuple(self.values)
        return tuple(self.losses) or (self.base.loss,)

    def cells(self):
        """Get ``({axis: value}, config)`` for every cell, values outermost."""
        ret = []
        for value in self.values:
            losses = (value,) if self.axis == "loss" else self.cell_losses()
            for loss in losses:
                config = self.base.with_value("loss", loss)
                config = config.with_value(self.axis, value)
                ret.append(({"axis_value": value}, config))
        return _seeded(ret, self.base.seed, self.reseed)


@dataclass
class GridConfig:
    """The cartesian product of value lists, one run per cell.

    :param base: Settings shared by every cell
    :type base: ExperimentConfig
    :param axes: Setting name to its values, in command line order
    :type axes: dict
    :param losses: Losses run at every cell; the base loss when empty
    :type losses: tuple
    """

    base: ExperimentConfig
    axes: dict
    losses: tuple = ()
    reseed: bool = False

    def validate(self):
        if not self.axes:
            raise ConfigError("no grid axes given", "grid")
        for key, values in self.axes.items():
            if not values:
                raise ConfigError("no values for %r" % key, "grid")
        return self

    def cells(self):
        ret = []
        keys = list(self.axes)
        losses = tuple(self.losses) or (self.base.loss,)
        for combo in itertools.product(*(self.axes[k] for k in keys)):
            for loss in losses:
                config = self.base.with_value("loss", loss)
                for key, value in zip(keys, combo):
                    config = config.with_value(key, value)
                ret.append((dict(zip(keys, combo)), config))
        return _seeded(ret, self.base.seed, self.reseed)


def _seeded(cells, seed, reseed):
    if not reseed:
        return cells
    return [(values, replace(config, seed=cell_seed(seed, i)))
            for i, (values, config) in enumerate(cells)]


def _run_cell(cell):
    values, config = cell
    try:
        result = run_experiment(config)
    except BenchError as e:
        logger.error("Cell %s with %s failed: %s", values, config.loss, e)
        return values, config, None, str(e)
    return values, config, result, None


def run_cells(cells, workers=1):
    """Run cells, at most ``workers`` at a time, and keep going on errors.

    :param cells: ``(values, config)`` pairs from ``cells()``
    :type cells: list[tuple[dict, ExperimentConfig]]
    :return: ``(values, config, result or None, error or None)`` in cell
        order
    :rtype: list[tuple]
    """
    if workers < 1:
        raise ConfigError("must be >= 1, got %r" % workers, "workers")
    logger.info("Running %s cells on %s workers", len(cells), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, cells))
