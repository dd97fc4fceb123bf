import csv
import json

import pytest

import cctl.experiment as experiment
from cctl.cli import main
from cctl.numerics import NonFiniteError

from conftest import tiny_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config().to_dict()))
    return path


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestTrainAndEvaluate:
    def test_train_then_evaluate_then_report(self, capsys, tmp_path, config_file):
        run = tmp_path / "run"
        code, out, _ = run_cli(capsys, "train", "--config", config_file, "--out", run)
        assert code == 0
        summary = json.loads(out)
        assert summary["out"] == str(run) and 0.0 <= summary["auc_mean"] <= 1.0

        data = tmp_path / "data"
        assert run_cli(capsys, "generate-data", "--config", config_file, "--out", data)[0] == 0
        assert (data / "dataset.json").exists() and (data / "target_test.csv").exists()

        code, out, _ = run_cli(capsys, "evaluate", "--model", run / "model_seed0.json", "--data", data)
        assert code == 0
        ev = json.loads(out)
        assert ev["auc"] == pytest.approx(summary["auc_mean"], abs=0)
        assert ev["config_hash"] == summary["config_hash"]

        code, out, _ = run_cli(capsys, "evaluate", "--model", run / "model_seed0.json", "--data",
                               data / "target_test.csv")
        assert code == 0 and json.loads(out)["auc"] == ev["auc"]

        code, out, _ = run_cli(capsys, "report", "--run", run)
        assert code == 0
        names = {p.split("/")[-1] for p in json.loads(out)["files"]}
        assert {"epochs.csv", "seeds.csv", "summary.json", "auc_per_epoch.png"} <= names
        with open(run / "seeds.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["config_hash"] == summary["config_hash"]

    def test_method_seed_and_set_overrides(self, capsys, tmp_path, config_file):
        code, _, _ = run_cli(capsys, "train", "--config", config_file, "--out", tmp_path / "r", "--method", "lr",
                             "--seed", 4, "--set", "train.epochs=1", "--set", "name=probe")
        assert code == 0
        saved = json.loads((tmp_path / "r" / "config.json").read_text())
        assert (saved["method"], saved["seeds"], saved["train"]["epochs"], saved["name"]) == ("lr", [4], 1, "probe")

    def test_default_run_directory_uses_hash(self, capsys, tmp_path, config_file):
        code, out, _ = run_cli(capsys, "train", "--config", config_file, "--set",
                               f"output_dir={json.dumps(str(tmp_path))}")
        assert code == 0
        summary = json.loads(out)
        assert summary["out"].split("/")[-1].startswith(summary["config_hash"] + "-")


class TestSweep:
    def test_sweep_emits_csv(self, capsys, tmp_path, config_file):
        out_dir = tmp_path / "s"
        code, out, _ = run_cli(capsys, "sweep", "--config", config_file, "--out", out_dir, "--param", "cctl.alpha",
                               "--values", "0,0.5")
        assert code == 0
        rows = list(csv.DictReader(out.splitlines()))
        assert [float(r["value"]) for r in rows] == [0.0, 0.5]
        assert (out_dir / "sweep.csv").exists()
        code, out, _ = run_cli(capsys, "report", "--run", out_dir)
        assert code == 0 and (out_dir / "sweep_curve.png").exists()


class TestErrors:
    def error(self, capsys, *argv):
        code, _, err = run_cli(capsys, *argv)
        return code, json.loads(err.strip().splitlines()[-1])

    def test_unknown_config_key(self, capsys, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"cctl": {"alpah": 1}}))
        code, err = self.error(capsys, "train", "--config", path, "--out", tmp_path / "x")
        assert code == 2 and err["error"] == "ConfigError" and "alpah" in err["message"]
        assert not (tmp_path / "x").exists()

    def test_bad_set(self, capsys):
        code, err = self.error(capsys, "train", "--set", "cctl.alpha")
        assert code == 2 and "key=value" in err["message"]

    def test_missing_model(self, capsys, tmp_path):
        code, err = self.error(capsys, "evaluate", "--model", tmp_path / "none.json", "--data", tmp_path)
        assert code == 2 and err["error"] == "FileNotFoundError"

    def test_malformed_csv(self, capsys, tmp_path, config_file):
        run = tmp_path / "run"
        run_cli(capsys, "train", "--config", config_file, "--out", run, "--set", "train.epochs=1")
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b,c,d,e,f,g\n1,1,1,1,1,,7\n")
        code, err = self.error(capsys, "evaluate", "--model", run / "model_seed0.json", "--data", bad)
        assert code == 2 and err["error"] == "CsvFormatError" and "bad.csv:2" in err["message"]

    def test_empty_report_dir(self, capsys, tmp_path):
        code, err = self.error(capsys, "report", "--run", tmp_path)
        assert code == 2 and err["error"] == "input_error"

    def test_numerical_failure_exit_code(self, capsys, tmp_path, config_file, monkeypatch):
        def boom(*args, **kwargs):
            raise NonFiniteError("non-finite ren.loss at step 0", component="ren.loss")

        monkeypatch.setattr(experiment, "train_step", boom)
        code, err = self.error(capsys, "train", "--config", config_file, "--out", tmp_path / "r")
        assert code == 3 and err["error"] == "numerical_failure" and "ren.loss" in err["message"]
        assert json.loads((tmp_path / "r" / "report.json").read_text())["failed"] is True


class TestSchema:
    def test_prints_schema(self, capsys):
        code, out, _ = run_cli(capsys, "schema")
        assert code == 0 and json.loads(out)["additionalProperties"] is False
