"""Functions for generating human-readable result tables.

Recall@K and NMI are shown in percent with one decimal, one row per
method (and step, for the history of a run).
"""

import pandas as pd

from definitions import LOSS_DEFAULTS, RECALL_KS

METRIC_HEADERS = ["R@%s" % k for k in RECALL_KS] + ["NMI"]


def get_metric_cells(report):
    """Get the percent metric cells of one evaluation.

    :param report: Evaluation, ``None`` for a failed run
    :type report: clustering_eval.EvalReport | None
    :rtype: dict
    """
    if report is None:
        return {h: float("nan") for h in METRIC_HEADERS}
    ret = {"R@%s" % k: 100.0 * report.recall_at[k] for k in RECALL_KS}
    ret["NMI"] = 100.0 * report.nmi
    return ret


def get_history_frame(loss, history):
    """Get one table row per evaluation of a run.

    :param loss: Loss name shown in the Method column
    :type loss: str
    :param history: Reports of the run
    :type history: list[clustering_eval.EvalReport]
    :rtype: pd.DataFrame
    """
    rows = [dict({"Method": loss, "Step": e.step, "Metric": e.metric},
                 **get_metric_cells(e)) for e in history]
    return pd.DataFrame(rows,
                        columns=["Method", "Step", "Metric"] + METRIC_HEADERS)


def get_cells_frame(outcomes):
    """Get one table row per sweep or grid cell, from its final report.

    :param outcomes: ``experiment.run_cells`` return value
    :type outcomes: list[tuple]
    :rtype: pd.DataFrame
    """
    rows = []
    for values, config, result, error in outcomes:
        row = {"Cell": ", ".join("%s=%s" % e for e in values.items()),
               "Method": config.loss}
        row.update(get_metric_cells(result.final if result else None))
        row["Status"] = "error" if error else result.status
        rows.append(row)
    return pd.DataFrame(rows, columns=["Cell", "Method"] + METRIC_HEADERS
                        + ["Status"])


def get_defaults_frame():
    """Get the per-loss defaults shipped in ``assets/loss_defaults.json``."""
    rows = []
    for name, d in LOSS_DEFAULTS.items():
        rows.append({
            "Method": name,
            "Sampler": d["sampler"],
            "Normalize": d["normalize"],
            "Normalize (reference)": d["reported_normalize"],
            "Optimizer": d["optimizer"],
            "Embedding": d.get("embedding_dim", "default"),
            "Params": ", ".join("%s=%s" % e for e in d["params"].items()),
        })
    return pd.DataFrame(rows)


def get_table_text(frame):
    return frame.to_string(index=False, float_format="{:.1f}".format,
                           na_rep="-")
