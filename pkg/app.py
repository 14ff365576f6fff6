"""Entry point of the benchmark.

Subcommands:

* ``run`` trains and evaluates one configuration, writes the JSON report
  and prints the result table
* ``sweep`` runs one configuration per value of an axis into a CSV
* ``grid`` runs the cartesian product of value lists into a CSV
* ``verify`` runs the gradient and oracle self-checks
* ``losses`` prints the per-loss defaults

Settings come from ``bin/config.ini`` (or ``--config``), overridden by
flags. The log level is read from ``DML_BENCH_LOG_LEVEL``. Exit codes are
0 on success, 1 for a failed verification or a diverged run and 2 for an
invalid configuration.
"""

import argparse
import logging
import os
import sys

from definitions import DEFAULT_CONFIG_PATH, LOG_LEVEL_ENV_VAR
from errors import BenchError, ConfigError
from experiment import (SWEEP_AXES, ExperimentConfig, GridConfig,
                        SweepConfig, parse_assignments, parse_value,
                        run_cells, run_experiment)
from generators import report_generator, sweep_generator, table_generator
from trainer.checkpoint import atomic_write
from trainer.encoder import ENCODER_KINDS
from trainer.optimizers import OPTIMIZER_KINDS
from verification import CHECK_GROUPS, FAULTS, run_checks

logger = logging.getLogger(__name__)

DEFAULT_OUT = {"run": "report.json", "sweep": "sweep.csv", "grid": "grid.csv"}


def configure_logging(verbose):
    """Set the root log level from the environment, raised by ``-v``."""
    name = os.environ.get(LOG_LEVEL_ENV_VAR, "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        level = logging.WARNING
    if verbose:
        level = min(level, logging.DEBUG if verbose > 1 else logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


def get_overrides(args):
    """Get config fields set by flags, and the losses of a multi-loss run.

    ``--loss`` may list several losses separated by commas for ``sweep``
    and ``grid``; the first one is the base loss.

    :rtype: tuple[dict, tuple]
    """
    params = parse_assignments(args.param)
    if args.scale is not None:
        params["scale"] = args.scale
    if args.temperature is not None:
        params["temperature"] = args.temperature
    optimizer = {}
    if args.optimizer is not None:
        optimizer["kind"] = args.optimizer
    if args.learning_rate is not None:
        optimizer["learning_rate"] = args.learning_rate
    losses = ()
    loss = args.loss
    if loss is not None and "," in loss:
        losses = tuple(e.strip() for e in loss.split(",") if e.strip())
        loss = losses[0]
    hidden_dims = None
    if args.hidden_dims is not None:
        hidden_dims = _as_list(parse_value(args.hidden_dims))
    ret = {
        "loss": loss,
        "sampler": args.sampler,
        "params": params or None,
        "encoder": args.encoder,
        "hidden_dims": hidden_dims,
        "embedding_dim": args.embedding_dim,
        "normalize": args.normalize,
        "optimizer": optimizer or None,
        "dataset": args.dataset,
        "synthetic": parse_assignments(args.synthetic, "synthetic") or None,
        "batch_size": args.batch_size,
        "accumulate": args.accumulate,
        "steps": args.steps,
        "eval_every": args.eval_every,
        "binarize": args.binarize,
        "workers": args.workers,
        "seed": args.seed,
        "out": args.out,
    }
    return ret, losses


def get_config(args):
    """Get the experiment config of ``args`` and the extra losses.

    :rtype: tuple[experiment.ExperimentConfig, tuple]
    :raise ConfigError: Invalid config file or flags
    """
    ini_path = args.config
    if ini_path is None and os.path.isfile(DEFAULT_CONFIG_PATH):
        ini_path = DEFAULT_CONFIG_PATH
    overrides, losses = get_overrides(args)
    if args.command != "run":
        # --workers spreads cells over threads; each cell runs on one
        overrides["workers"] = None
    elif losses:
        raise ConfigError("run takes a single loss", "loss")
    return ExperimentConfig.from_sources(ini_path, overrides), losses


def _table_path(out):
    return os.path.splitext(out)[0] + ".txt"


def _write_text(path, text):
    atomic_write(path, lambda fp: fp.write(text.encode("utf-8")))


def cmd_run(args):
    config, _ = get_config(args)
    result = run_experiment(config, args.checkpoint, args.timing)
    out = config.out or DEFAULT_OUT["run"]
    report_generator.write_report(out, report_generator.get_report(result))
    text = table_generator.get_table_text(
        table_generator.get_history_frame(config.loss, result.history))
    _write_text(_table_path(out), text + "\n")
    print(text)
    logger.info("Wrote %s", out)
    if result.status != "ok":
        print("error: %s" % result.error, file=sys.stderr)
        return 1
    return 0


def _write_cells(config, outcomes, key_columns, command):
    out = config.out or DEFAULT_OUT[command]
    frame = sweep_generator.get_cells_frame(outcomes, key_columns)
    sweep_generator.write_csv(out, frame)
    print(table_generator.get_table_text(
        table_generator.get_cells_frame(outcomes)))
    n_failed = sum(1 for e in outcomes if e[3] is not None
                   or e[2].status != "ok")
    if n_failed:
        print("%s of %s cells failed, see %s" % (n_failed, len(outcomes),
                                                  out), file=sys.stderr)
    logger.info("Wrote %s", out)
    return 0


def cmd_sweep(args):
    config, losses = get_config(args)
    sweep = SweepConfig(config, args.axis, _as_list(parse_value(args.values)),
                        losses, args.reseed).validate()
    outcomes = run_cells(sweep.cells(), args.workers or 1)
    return _write_cells(config, outcomes, ["axis_value"], "sweep")


def cmd_grid(args):
    config, losses = get_config(args)
    axes = {k: _as_list(v)
            for k, v in parse_assignments(args.grid, "grid").items()}
    grid = GridConfig(config, axes, losses, args.reseed).validate()
    outcomes = run_cells(grid.cells(), args.workers or 1)
    return _write_cells(config, outcomes, list(axes), "grid")


def cmd_verify(args):
    only = []
    for item in args.only or ():
        only += [e.strip() for e in item.split(",") if e.strip()]
    results = run_checks(only, args.inject_fault, args.seed or 0,
                         args.quick)
    for e in results:
        print(e.status_line())
    failed = [e for e in results if not e.passed]
    print("%s of %s checks passed" % (len(results) - len(failed),
                                      len(results)))
    return 1 if failed else 0


def cmd_losses(_):
    print(table_generator.get_table_text(
        table_generator.get_defaults_frame()))
    return 0


def _add_experiment_args(parser):
    parser.add_argument("--config", help="ini file (default bin/config.ini)")
    parser.add_argument("--loss", help="loss name; comma separated list "
                                       "for sweep and grid")
    parser.add_argument("--sampler", help="sampler name")
    parser.add_argument("--param", action="append", metavar="K=V",
                        help="loss hyperparameter, repeatable")
    parser.add_argument("--scale", type=float, help="proxy distance scale")
    parser.add_argument("--temperature", type=float,
                        help="proxy-nca or proxy-softmax temperature")
    parser.add_argument("--dataset", help="feature CSV (label,f0,...)")
    parser.add_argument("--synthetic", action="append", metavar="K=V",
                        help="synthetic data setting, repeatable")
    parser.add_argument("--encoder", choices=ENCODER_KINDS)
    parser.add_argument("--hidden-dims", help="mlp widths, e.g. 64,32")
    parser.add_argument("--embedding-dim", type=int)
    parser.add_argument("--normalize", action=argparse.BooleanOptionalAction,
                        help="L2-normalize embeddings")
    parser.add_argument("--optimizer", choices=OPTIMIZER_KINDS)
    parser.add_argument("--learning-rate", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--accumulate", type=int,
                        help="batches aggregated per update")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--eval-every", type=int)
    parser.add_argument("--binarize", action=argparse.BooleanOptionalAction,
                        help="retrieve on sign codes under Hamming distance")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--out", help="output file")
    parser.add_argument("--timing", action="store_true",
                        help="record wall time in the report")


def get_parser():
    parser = argparse.ArgumentParser(
        prog="dml-bench",
        description="Train and evaluate deep metric learning losses.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    _add_experiment_args(run)
    run.add_argument("--checkpoint",
                     help="resume from and save to this checkpoint")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="one run per axis value")
    _add_experiment_args(sweep)
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument("--values", required=True, help="e.g. 2,8,32,128")
    sweep.add_argument("--reseed", action="store_true",
                       help="derive a seed per cell")
    sweep.set_defaults(func=cmd_sweep)

    grid = sub.add_parser("grid", help="cartesian product of value lists")
    _add_experiment_args(grid)
    grid.add_argument("--grid", action="append", required=True,
                      metavar="K=V1,V2", help="grid axis, repeatable")
    grid.add_argument("--reseed", action="store_true")
    grid.set_defaults(func=cmd_grid)

    verify = sub.add_parser("verify", help="run the self-checks")
    verify.add_argument("--only", action="append",
                        help="check groups: %s" % ", ".join(CHECK_GROUPS))
    verify.add_argument("--inject-fault", choices=FAULTS)
    verify.add_argument("--seed", type=int)
    verify.add_argument("--quick", action="store_true",
                        help="run every check at a smaller size")
    verify.set_defaults(func=cmd_verify)

    losses = sub.add_parser("losses", help="print the per-loss defaults")
    losses.set_defaults(func=cmd_losses)
    return parser


def main(argv=None):
    """Run the command line and get its exit code."""
    args = get_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except BenchError as e:
        print("error: %s" % e, file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
