"""Functions for generating the long-format CSV of a sweep or grid.

One row per cell and loss: the cell's setting values, the loss, the final
Recall@K and NMI as fractions, the status and the error of failed cells.
"""

import pandas as pd

from definitions import RECALL_KS
from trainer.checkpoint import atomic_write

METRIC_COLUMNS = ["recall_at_%s" % k for k in RECALL_KS] + ["nmi"]


def get_cell_row(values, config, result, error):
    """Get the CSV row of one cell.

    :param values: Setting name to the value of this cell
    :type values: dict
    :type config: experiment.ExperimentConfig
    :param result: Outcome, ``None`` when the cell failed to start
    :type result: experiment.RunResult | None
    :param error: Message of the error that stopped the cell
    :type error: str | None
    :rtype: dict
    """
    row = {k: _cell_value(v) for k, v in values.items()}
    row["loss"] = config.loss
    final = result.final if result else None
    for k in RECALL_KS:
        row["recall_at_%s" % k] = final.recall_at[k] if final else None
    row["nmi"] = final.nmi if final else None
    if error is not None:
        row["status"], row["error"] = "error", error
    else:
        row["status"], row["error"] = result.status, result.error or ""
    return row


def _cell_value(value):
    if isinstance(value, (list, tuple)):
        return ",".join(str(e) for e in value)
    return value


def get_cells_frame(outcomes, key_columns):
    """Get the CSV frame of a sweep or grid.

    :param outcomes: ``experiment.run_cells`` return value
    :type outcomes: list[tuple]
    :param key_columns: Setting columns, e.g. ``["axis_value"]``
    :type key_columns: list[str]
    :rtype: pd.DataFrame
    """
    rows = [get_cell_row(*e) for e in outcomes]
    return pd.DataFrame(rows, columns=list(key_columns) + ["loss"]
                        + METRIC_COLUMNS + ["status", "error"])


def write_csv(path, frame):
    text = frame.to_csv(index=False, lineterminator="\n")
    atomic_write(path, lambda fp: fp.write(text.encode("utf-8")))
