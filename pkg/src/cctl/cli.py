"""Command line entry point: ``cctl {generate-data,train,evaluate,sweep,report,schema}``.

Failures print one JSON object on stderr and exit nonzero:
2 for bad configs or inputs, 3 for runs that hit a numerical failure, 1 otherwise.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import datetime
from pathlib import Path

from .config import ConfigError, ExperimentConfig, from_dict, json_schema, load_config
from .data import CsvFormatError, generate_synthetic, load_csv, load_dataset, save_dataset
from .evalmetrics import evaluate
from .experiment import SWEEP_COLUMNS, run_experiment, sweep
from .features import SchemaError
from .scn import load_tower

log = logging.getLogger("cctl")


class CliError(Exception):
    def __init__(self, message: str, code: int = 2, kind: str = "input_error"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    if getattr(args, "method", None):
        changes["method"] = args.method
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            changes[key] = json.loads(raw)
        except json.JSONDecodeError:
            changes[key] = raw
    return cfg.replace(**changes) if changes else cfg


def _run_dir(args, cfg: ExperimentConfig, kind: str = "") -> Path:
    if args.out:
        return Path(args.out)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    return Path(cfg.output_dir) / f"{cfg.hash()}{kind}-{stamp}"


def _print(obj) -> None:
    print(json.dumps(obj, indent=2))


# --------------------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg = _config(args)
    if cfg.data.synthetic is None:
        raise ConfigError("generate-data needs a synthetic data config")
    synth = cfg.data.synthetic
    if args.seed is not None:
        synth.seed = args.seed
    synth.embed_dim = cfg.model.embed_dim
    out = _run_dir(args, cfg, "-data")
    save_dataset(generate_synthetic(synth), out, synth)
    _print({"config_hash": cfg.hash(), "out": str(out)})
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    report = run_experiment(cfg, out_dir=_run_dir(args, cfg))
    _print({k: v for k, v in report.to_dict().items() if k != "runs"} | {"out": report.out_dir})
    if report.failed:
        errors = [r.error for r in report.runs if r.failed]
        raise CliError("; ".join(errors), code=3, kind="numerical_failure")
    return 0


def cmd_evaluate(args) -> int:
    tower, meta = load_tower(args.model)
    schema = tower.target.schema
    data = Path(args.data)
    if data.is_dir():
        part = load_dataset(data).part("target", args.split)
    else:
        part = load_csv(data, schema)
    report = evaluate(tower, part)
    _print({"model": str(args.model), "data": str(data), "config_hash": meta.get("config_hash", ""),
            **report.to_dict()})
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = [json.loads(v) for v in args.values.split(",")]
    out = _run_dir(args, cfg, "-sweep")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    rows = sweep(args.param, values, cfg, out_csv=out / "sweep.csv", write_runs=args.keep_runs,
                 out_dir=out if args.keep_runs else None)
    (out / "sweep.json").write_text(json.dumps({"param": args.param, "config_hash": cfg.hash(), "rows": rows},
                                               indent=2))
    w = csv.DictWriter(sys.stdout, fieldnames=SWEEP_COLUMNS)
    w.writeheader()
    w.writerows(rows)
    return 0


def cmd_report(args) -> int:
    from .plots import render_report, sweep_curve

    run = Path(args.run)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if (run / "sweep.json").exists():
        doc = json.loads((run / "sweep.json").read_text())
        written.append(sweep_curve(doc["rows"], doc["param"], out / "sweep_curve.png"))
    if (run / "report.json").exists():
        report = json.loads((run / "report.json").read_text())
        written += write_report_tables(report, out)
        written += render_report(report, out)
    if not written:
        raise CliError(f"{run} holds neither report.json nor sweep.json")
    _print({"out": str(out), "files": [str(p) for p in written]})
    return 0


EPOCH_COLUMNS = ["config_hash", "method", "seed", "epoch", "step", "test_auc", "test_logloss", "val_auc"]
SEED_COLUMNS = ["config_hash", "method", "seed", "steps", "auc", "logloss", "selector_mean_p", "failed"]


def write_report_tables(report: dict, out: Path) -> list[Path]:
    """Per-epoch and per-seed CSV tables plus a summary JSON."""
    h, m = report["config_hash"], report["method"]
    epochs, seeds = out / "epochs.csv", out / "seeds.csv"
    with open(epochs, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EPOCH_COLUMNS)
        w.writeheader()
        for run in report["runs"]:
            for e in run["epochs"]:
                w.writerow({"config_hash": h, "method": m, "seed": run["seed"], "epoch": e["epoch"],
                            "step": e["step"], "test_auc": e["test"]["auc"], "test_logloss": e["test"]["logloss"],
                            "val_auc": None if e["val"] is None else e["val"]["auc"]})
    with open(seeds, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SEED_COLUMNS)
        w.writeheader()
        for run in report["runs"]:
            final = run["final"] or {}
            w.writerow({"config_hash": h, "method": m, "seed": run["seed"], "steps": run["steps"],
                        "auc": final.get("auc"), "logloss": final.get("logloss"),
                        "selector_mean_p": run["selector_mean_p"], "failed": run["failed"]})
    summary = out / "summary.json"
    summary.write_text(json.dumps({k: v for k, v in report.items() if k != "runs"}, indent=2))
    return [epochs, seeds, summary]


def cmd_schema(args) -> int:
    _print(json_schema())
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cctl", description="Cross-domain CTR transfer experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", metavar="PATH", help="experiment config (JSON); defaults apply if omitted")
        sp.add_argument("--out", metavar="DIR", help="output directory (default: <output_dir>/<hash>-<timestamp>)")
        if seed:
            sp.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config knob by dotted path; VALUE is parsed as JSON when possible")

    sp = sub.add_parser("generate-data", help="write a synthetic dataset as CSV files")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train a method over the configured seeds")
    common(sp)
    sp.add_argument("--method", choices=["cctl", "pure_dnn", "lr", "finetune", "naive_mixed"])
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score an exported model on a dataset")
    sp.add_argument("--model", required=True, metavar="PATH", help="exported tower JSON")
    sp.add_argument("--data", required=True, metavar="PATH", help="dataset directory or target CSV file")
    sp.add_argument("--split", default="test", choices=["train", "test"])
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="one multi-seed run per value of a knob")
    common(sp)
    sp.add_argument("--param", required=True, help="dotted config path, e.g. cctl.alpha")
    sp.add_argument("--values", required=True, help="comma-separated JSON values, e.g. 0,0.25,0.5")
    sp.add_argument("--method", choices=["cctl", "pure_dnn", "lr", "finetune", "naive_mixed"])
    sp.add_argument("--keep-runs", action="store_true", help="also write each run's directory")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="tables and figures for a finished run or sweep")
    sp.add_argument("--run", required=True, metavar="DIR")
    sp.add_argument("--out", metavar="DIR", help="defaults to the run directory")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("schema", help="print the config JSON schema")
    sp.set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        err = {"error": e.kind, "message": str(e)}
        code = e.code
    except (ConfigError, CsvFormatError, SchemaError) as e:
        err = {"error": type(e).__name__, "message": str(e)}
        code = 2
    except (FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as e:
        err = {"error": type(e).__name__, "message": str(e)}
        code = 2 if not isinstance(e, KeyError) else 1
    print(json.dumps(err), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
