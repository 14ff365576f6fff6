import json

import pandas as pd
import pytest

import app


@pytest.fixture(autouse=True)
def quiet(monkeypatch):
    monkeypatch.setenv("DML_BENCH_LOG_LEVEL", "ERROR")


class TestRun:

    def test_writes_report_and_table(self, tiny_args, tmp_path, capsys):
        out = tmp_path / "report.json"
        assert app.main(["run", *tiny_args, "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["status"] == "ok"
        assert [e["step"] for e in report["history"]] == [0, 1, 2]
        assert (tmp_path / "report.txt").exists()
        assert "R@1" in capsys.readouterr().out

    def test_identical_runs_identical_bytes(self, tiny_args, tmp_path):
        paths = [tmp_path / "a.json", tmp_path / "b.json"]
        for path in paths:
            assert app.main(["run", *tiny_args, "--out", str(path)]) == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_timing_recorded(self, tiny_args, tmp_path):
        out = tmp_path / "report.json"
        app.main(["run", *tiny_args, "--timing", "--out", str(out)])
        assert json.loads(out.read_text())["wall_time_seconds"] >= 0.0

    def test_incompatible_sampler(self, tiny_args, tmp_path, capsys):
        code = app.main(["run", *tiny_args, "--loss", "triplet-semihard",
                         "--sampler", "npairs",
                         "--out", str(tmp_path / "r.json")])
        assert code == 2
        assert "sampler" in capsys.readouterr().err
        assert not (tmp_path / "r.json").exists()

    def test_run_takes_one_loss(self, tiny_args, tmp_path):
        assert app.main(["run", *tiny_args, "--loss", "npairs,lifted",
                         "--out", str(tmp_path / "r.json")]) == 2

    def test_checkpoint_resume(self, tiny_args, tmp_path):
        checkpoint = str(tmp_path / "run.npz")
        first = tmp_path / "first.json"
        second = tmp_path / "second.json"
        app.main(["run", *tiny_args, "--checkpoint", checkpoint,
                  "--out", str(first)])
        app.main(["run", *tiny_args, "--steps", "3", "--checkpoint",
                  checkpoint, "--out", str(second)])
        history = json.loads(second.read_text())["history"]
        assert [e["step"] for e in history] == [0, 1, 2, 3]
        assert history[:3] == json.loads(first.read_text())["history"]


class TestSweepAndGrid:

    def test_sweep_csv(self, tiny_args, tmp_path):
        out = tmp_path / "sweep.csv"
        code = app.main(["sweep", *tiny_args, "--loss", "proxy-nca,npairs",
                         "--axis", "embedding_size", "--values", "4,8",
                         "--workers", "2", "--out", str(out)])
        assert code == 0
        frame = pd.read_csv(out)
        assert frame["axis_value"].tolist() == [4, 4, 8, 8]
        assert frame["loss"].tolist() == ["proxy-nca", "npairs"] * 2
        assert set(frame["status"]) == {"ok"}

    def test_failed_cell_is_a_row(self, tiny_args, tmp_path, capsys):
        out = tmp_path / "grid.csv"
        code = app.main(["grid", *tiny_args,
                         "--grid", "sampler=class-balanced,semihard",
                         "--out", str(out)])
        assert code == 0
        frame = pd.read_csv(out)
        assert frame["status"].tolist() == ["ok", "error"]
        assert "semihard" in frame["error"][1]
        assert "1 of 2 cells failed" in capsys.readouterr().err

    def test_grid_csv(self, tiny_args, tmp_path):
        out = tmp_path / "grid.csv"
        code = app.main(["grid", *tiny_args,
                         "--grid", "learning_rate=0.001,0.01",
                         "--grid", "margin=0.1,0.2",
                         "--loss", "proxy-triplet", "--out", str(out)])
        assert code == 0
        frame = pd.read_csv(out)
        assert list(frame.columns[:3]) == ["learning_rate", "margin", "loss"]
        assert len(frame) == 4

    def test_single_value_sweep_equals_run(self, tiny_args, tmp_path):
        report = tmp_path / "report.json"
        sweep = tmp_path / "sweep.csv"
        assert app.main(["run", *tiny_args, "--out", str(report)]) == 0
        assert app.main(["sweep", *tiny_args, "--axis", "embedding_size",
                         "--values", "8", "--out", str(sweep)]) == 0
        final = json.loads(report.read_text())["history"][-1]
        row = pd.read_csv(sweep).iloc[0]
        for k, v in final["recall_at"].items():
            assert row["recall_at_%s" % k] == pytest.approx(v, rel=1e-12)
        assert row["nmi"] == pytest.approx(final["nmi"], rel=1e-12)

    def test_unknown_axis(self, tiny_args):
        with pytest.raises(SystemExit):
            app.main(["sweep", *tiny_args, "--axis", "depth",
                      "--values", "1"])


class TestVerify:

    def test_nmi(self, capsys):
        assert app.main(["verify", "--only", "nmi"]) == 0
        assert "checks passed" in capsys.readouterr().out

    @pytest.mark.slow
    def test_injected_fault_fails(self, capsys):
        code = app.main(["verify", "--only", "grad-check",
                         "--inject-fault", "grad-sign"])
        assert code == 1
        assert "FAIL grad-check proxy-nca" in " ".join(
            capsys.readouterr().out.split())

    def test_quick(self, capsys):
        assert app.main(["verify", "--only", "mining", "--quick"]) == 0
        assert "checks passed" in capsys.readouterr().out

    def test_unknown_group(self):
        assert app.main(["verify", "--only", "bogus"]) == 2


def test_losses_table(capsys):
    assert app.main(["losses"]) == 0
    out = capsys.readouterr().out
    assert "struct-clust" in out and "rmsprop" in out
