import json
import math

import pandas as pd
import pytest

from clustering_eval import EvalReport
from definitions import LOSS_NAMES, RECALL_KS
from errors import BenchError
from experiment import ExperimentConfig, RunResult, run_experiment
from generators import report_generator, sweep_generator, table_generator


def _report(step=0, scale=1.0):
    return EvalReport({k: min(1.0, scale * 0.1 * (i + 1))
                       for i, k in enumerate(RECALL_KS)}, 0.5, 40,
                      step=step)


@pytest.fixture
def result():
    return RunResult({"loss": "proxy-nca"}, [_report(0), _report(10, 2.0)],
                     seed=0)


@pytest.fixture
def outcomes():
    ok = RunResult({}, [_report(5)], seed=1)
    return [({"axis_value": 2}, ExperimentConfig(), ok, None),
            ({"axis_value": 4}, ExperimentConfig(loss="margin"), None,
             "sampler: incompatible")]


class TestReport:

    def test_follows_schema(self, result):
        report = report_generator.get_report(result)
        assert report_generator.get_schema_errors(report) == []
        assert report["history"][1]["recall_at"]["1"] == pytest.approx(0.2)
        assert report["wall_time_seconds"] is None

    def test_schema_violations(self, result):
        report = report_generator.get_report(result)
        del report["status"]
        report["seed"] = True
        errors = report_generator.get_schema_errors(report)
        assert "report: missing 'status'" in errors
        assert any(e.startswith("report.seed") for e in errors)
        with pytest.raises(BenchError):
            report_generator.get_report_text(report)

    def test_nested_violation(self, result):
        report = report_generator.get_report(result)
        del report["history"][0]["recall_at"]["16"]
        assert report_generator.get_schema_errors(report) \
            == ["report.history[0].recall_at: missing '16'"]

    def test_same_run_same_text(self, tiny_config):
        texts = [report_generator.get_report_text(
            report_generator.get_report(run_experiment(tiny_config)))
            for _ in range(2)]
        assert texts[0] == texts[1]
        assert json.loads(texts[0])["status"] == "ok"

    def test_write(self, result, tmp_path):
        path = tmp_path / "out" / "report.json"
        report_generator.write_report(str(path),
                                      report_generator.get_report(result))
        assert json.loads(path.read_text())["seed"] == 0


class TestSweepCsv:

    def test_rows(self, outcomes):
        frame = sweep_generator.get_cells_frame(outcomes, ["axis_value"])
        assert list(frame.columns) == ["axis_value", "loss"] \
            + sweep_generator.METRIC_COLUMNS + ["status", "error"]
        assert frame["status"].tolist() == ["ok", "error"]
        assert frame["recall_at_1"][0] == pytest.approx(0.1)
        assert math.isnan(frame["nmi"][1])

    def test_list_values_joined(self):
        row = sweep_generator.get_cell_row(
            {"hidden_dims": (32, 16)}, ExperimentConfig(),
            RunResult({}, [_report()], 0), None)
        assert row["hidden_dims"] == "32,16"

    def test_write(self, outcomes, tmp_path):
        path = tmp_path / "sweep.csv"
        sweep_generator.write_csv(
            str(path), sweep_generator.get_cells_frame(outcomes,
                                                       ["axis_value"]))
        frame = pd.read_csv(path)
        assert frame["loss"].tolist() == ["proxy-nca", "margin"]
        assert frame["error"][1] == "sampler: incompatible"


class TestTables:

    def test_history_in_percent(self, result):
        frame = table_generator.get_history_frame("proxy-nca", result.history)
        assert frame["Step"].tolist() == [0, 10]
        assert frame["R@1"].tolist() == pytest.approx([10.0, 20.0])
        text = table_generator.get_table_text(frame)
        assert "R@16" in text and "50.0" in text

    def test_failed_cell_shows_dash(self, outcomes):
        text = table_generator.get_table_text(
            table_generator.get_cells_frame(outcomes))
        failed = [e for e in text.splitlines() if "axis_value=4" in e][0]
        assert failed.split()[-1] == "error"
        assert "-" in failed.split()

    def test_defaults_cover_every_loss(self):
        frame = table_generator.get_defaults_frame()
        assert frame["Method"].tolist() == LOSS_NAMES
