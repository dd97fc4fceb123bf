import csv
import json
import math

import numpy as np
import pytest

import cctl.experiment as experiment
from cctl.data import save_dataset
from cctl.evalmetrics import auc
from cctl.experiment import (RunReport, SeedRun, prepare_data, run_experiment, split_validation, sweep,
                             train_baseline)
from cctl.numerics import NonFiniteError
from cctl.scn import load_tower

from conftest import tiny_config


def losses(run, key):
    return [rec[key] for rec in run.trace]


@pytest.fixture(scope="module")
def target_only_dir(tmp_path_factory, tiny_dataset):
    """The tiny dataset on disk with the source CSVs left out of the sidecar."""
    out = tmp_path_factory.mktemp("target_only")
    save_dataset(tiny_dataset, out)
    side = json.loads((out / "dataset.json").read_text())
    side["files"] = {k: v for k, v in side["files"].items() if k.startswith("target/")}
    (out / "dataset.json").write_text(json.dumps(side))
    return out


class TestEquivalences:
    def test_naive_mixed_is_cctl_with_unit_weights_and_no_ren(self):
        naive = run_experiment(tiny_config(method="naive_mixed"), write=False)
        plain = run_experiment(tiny_config(**{"cctl.fixed_weight": 1.0, "cctl.disable_ren": True, "cctl.alpha": 0.0}),
                               write=False)
        assert naive.runs[0].trace == plain.runs[0].trace
        assert naive.runs[0].final == plain.runs[0].final

    def test_pure_dnn_matches_cctl_without_source(self, target_only_dir):
        cfg = tiny_config(**{"data.path": str(target_only_dir), "data.synthetic": None})
        cc = run_experiment(cfg, write=False).runs[0]
        pure = run_experiment(cfg.replace(method="pure_dnn"), write=False).runs[0]
        assert losses(cc, "loss_pure") == losses(pure, "loss_pure")
        assert losses(cc, "loss_tgt") == losses(pure, "loss_pure")
        assert cc.final == pure.final and pure.warnings == []

    def test_finetune_without_pretraining_is_pure_dnn(self):
        ft = run_experiment(tiny_config(method="finetune", **{"train.pretrain_epochs": 0}), write=False).runs[0]
        pure = run_experiment(tiny_config(method="pure_dnn"), write=False).runs[0]
        assert ft.trace == pure.trace and ft.final == pure.final


class TestBaselines:
    def test_pure_dnn_warns_about_source(self):
        run = run_experiment(tiny_config(method="pure_dnn"), write=False).runs[0]
        assert any("source" in w for w in run.warnings)

    def test_lr_fits_separable_data(self, tmp_path):
        cfg = tiny_config(**{"data.synthetic.interaction_scale": 0.0, "data.synthetic.additive_scale": 20.0,
                             "data.synthetic.context_scale": 0.0, "data.synthetic.bias_target": 0.0,
                             "train.epochs": 30, "train.lr": 0.05, "train.patience": None,
                             "train.val_fraction": 0.0})
        train_baseline("lr", cfg, out_dir=tmp_path)
        tower, _ = load_tower(tmp_path / "model_seed0.json")
        part = prepare_data(cfg).part("target", "train")
        assert tower.target.schema.embed_dim == 1 and tower.mlp.widths == [1]
        assert auc(tower.predict(part), part.labels) > 0.99

    def test_unknown_baseline(self):
        with pytest.raises(ValueError):
            train_baseline("cctl", tiny_config())

    def test_finetune_pretrains(self):
        with_pre = run_experiment(tiny_config(method="finetune"), write=False).runs[0]
        pure = run_experiment(tiny_config(method="pure_dnn"), write=False).runs[0]
        assert with_pre.trace[0]["loss_pure"] != pure.trace[0]["loss_pure"]

    @pytest.mark.parametrize("flag", ["cctl.disable_ifn", "cctl.disable_ren"])
    def test_ablation_flags_run(self, flag):
        run = run_experiment(tiny_config(**{flag: True}), write=False).runs[0]
        assert not run.failed and 0.0 <= run.auc <= 1.0
        if flag == "cctl.disable_ifn":
            assert run.selector == [] and run.selector_mean_p is None
        else:
            assert all(rec["loss_ren"] == 0.0 for rec in run.trace)


class TestReports:
    def test_aggregate_mean_and_std(self):
        cfg = tiny_config(seeds=[0, 1, 2])
        runs = [SeedRun(s, "cctl", final={"auc": a, "logloss": l}) for s, a, l in
                [(0, 0.7, 0.5), (1, 0.8, 0.4), (2, 0.9, 0.3)]]
        rep = RunReport.aggregate(cfg, runs)
        assert rep.auc_mean == pytest.approx(0.8) and rep.auc_std == pytest.approx(math.sqrt(0.02 / 3))
        assert rep.logloss_mean == pytest.approx(0.4)

    def test_failed_seeds_excluded(self):
        runs = [SeedRun(0, "cctl", final={"auc": 0.7, "logloss": 0.5}), SeedRun(1, "cctl", failed=True)]
        rep = RunReport.aggregate(tiny_config(), runs)
        assert rep.failed and rep.auc_mean == 0.7

    def test_three_seed_run_writes_outputs(self, tmp_path):
        rep = run_experiment(tiny_config(seeds=[0, 1, 2]), out_dir=tmp_path)
        assert len(rep.runs) == 3 and rep.auc_std > 0
        saved = json.loads((tmp_path / "report.json").read_text())
        assert saved["config_hash"] == rep.config_hash and {"auc_mean", "auc_std"} <= set(saved)
        assert [p.name for p in sorted(tmp_path.glob("model_seed*.json"))] == [f"model_seed{s}.json" for s in (0, 1, 2)]
        records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert {r["type"] for r in records} >= {"step", "epoch", "final", "selector"}
        assert all(r["config_hash"] == rep.config_hash for r in records)
        assert json.loads((tmp_path / "config.json").read_text()) == tiny_config(seeds=[0, 1, 2]).to_dict()

    def test_deterministic(self):
        a = run_experiment(tiny_config(), write=False)
        b = run_experiment(tiny_config(), write=False)
        assert a.deterministic_dict() == b.deterministic_dict()

    def test_numerical_failure_flags_partial_report(self, monkeypatch):
        calls = {"n": 0}
        real = experiment.train_step

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 5:
                raise NonFiniteError("non-finite mixed_tower.loss_tgt at step 4", component="mixed_tower.loss_tgt")
            return real(*args, **kwargs)

        monkeypatch.setattr(experiment, "train_step", flaky)
        rep = run_experiment(tiny_config(), write=False)
        run = rep.runs[0]
        assert rep.failed and run.failed and "loss_tgt" in run.error
        assert run.steps == 4 and len(run.trace) == 4 and math.isnan(rep.auc_mean)

    def test_early_stopping(self):
        run = run_experiment(tiny_config(**{"train.epochs": 50, "train.patience": 1}), write=False).runs[0]
        assert len(run.epochs) < 50

    def test_max_steps(self):
        run = run_experiment(tiny_config(**{"train.epochs": 50, "train.max_steps": 30}), write=False).runs[0]
        assert run.steps == 30 and len(run.trace) == 30


class TestValidationSplit:
    def test_disjoint_and_complete(self, tiny_dataset):
        part = tiny_dataset.part("target", "train")
        train, val = split_validation(part, 0.1, 0)
        assert len(val) == 72 and len(train) + len(val) == len(part)

    def test_disabled(self, tiny_dataset):
        part = tiny_dataset.part("target", "train")
        assert split_validation(part, 0.0, 0) == (part, None)


class TestSweep:
    def test_alpha_grid_rows(self, tmp_path):
        values = [0.0, 0.25, 0.5, 0.75, 1.0]
        rows = sweep("cctl.alpha", values, tiny_config(), out_csv=tmp_path / "s.csv")
        assert [r["value"] for r in rows] == values
        with open(tmp_path / "s.csv") as fh:
            table = list(csv.DictReader(fh))
        assert len(table) == 5 and list(table[0]) == experiment.SWEEP_COLUMNS

    def test_single_value_equals_run(self):
        cfg = tiny_config()
        row = sweep("cctl.alpha", [0.5], cfg)[0]
        rep = run_experiment(cfg, write=False)
        assert (row["auc_mean"], row["logloss_mean"], row["config_hash"]) == (rep.auc_mean, rep.logloss_mean,
                                                                              rep.config_hash)

    def test_gamma_values(self):
        rows = sweep("cctl.gamma", [0.0, 0.8], tiny_config())
        assert len(rows) == 2 and not any(r["failed"] for r in rows)
        assert rows[0]["config_hash"] != rows[1]["config_hash"]

    def test_unknown_parameter(self):
        with pytest.raises(ValueError):
            sweep("cctl.nope", [1], tiny_config())
