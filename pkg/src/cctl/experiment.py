"""Training runs for CCTL and the baselines, multi-seed aggregation, and parameter sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ExperimentConfig, set_path
from .data import BatchStream, Dataset, generate_synthetic, load_dataset
from .evalmetrics import EvalReport, evaluate
from .features import Batch, EmbeddingTables, embed_groups
from .ifn import IfnState, RewardBuffer, SanParams, align_backward, align_batch, init_selector, selector_weight
from .numerics import (AdamState, GradientBundle, NonFiniteError, adam_step, bce, bce_grad, component_rng,
                       mlp_backward, mlp_forward)
from .scn import (ParamGroup, ScnState, Tower, backward_target, export_pure_tower, forward_target, init_tower,
                  sync_params, train_step, write_tower)

log = logging.getLogger(__name__)

Logger = Callable[[dict], None]


# --------------------------------------------------------------------------- reports


@dataclass
class SeedRun:
    seed: int
    method: str
    epochs: list = field(default_factory=list)
    final: dict | None = None
    selector: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    selector_mean_p: float | None = None
    steps: int = 0
    failed: bool = False
    error: str | None = None
    warnings: list = field(default_factory=list)
    trace: list = field(default_factory=list, repr=False)
    wall_clock: float = 0.0

    @property
    def auc(self) -> float:
        return math.nan if self.final is None or self.final["auc"] is None else self.final["auc"]

    @property
    def logloss(self) -> float:
        return math.nan if self.final is None else self.final["logloss"]

    def to_dict(self, include_trace: bool = False, include_timing: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not include_trace:
            d.pop("trace")
        if not include_timing:
            d.pop("wall_clock")
        return d


@dataclass
class RunReport:
    config_hash: str
    method: str
    runs: list
    auc_mean: float
    auc_std: float
    logloss_mean: float
    logloss_std: float
    failed: bool = False
    wall_clock: float = 0.0
    out_dir: str | None = None

    @classmethod
    def aggregate(cls, cfg: ExperimentConfig, runs: list, wall_clock: float = 0.0) -> "RunReport":
        ok = [r for r in runs if not r.failed]
        aucs = np.array([r.auc for r in ok], dtype=float)
        losses = np.array([r.logloss for r in ok], dtype=float)

        def stat(a, f):
            return float(f(a)) if len(a) else math.nan

        return cls(cfg.hash(), cfg.method, runs, stat(aucs, np.mean), stat(aucs, lambda a: np.std(a, ddof=0)),
                   stat(losses, np.mean), stat(losses, lambda a: np.std(a, ddof=0)),
                   failed=any(r.failed for r in runs), wall_clock=wall_clock)

    def deterministic_dict(self) -> dict:
        """Everything except timing and output location; equal configs must reproduce this exactly."""
        return {
            "config_hash": self.config_hash, "method": self.method, "failed": self.failed,
            "auc_mean": self.auc_mean, "auc_std": self.auc_std,
            "logloss_mean": self.logloss_mean, "logloss_std": self.logloss_std,
            "runs": [r.to_dict(include_trace=True, include_timing=False) for r in self.runs],
        }

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash, "method": self.method, "failed": self.failed,
            "auc_mean": self.auc_mean, "auc_std": self.auc_std,
            "logloss_mean": self.logloss_mean, "logloss_std": self.logloss_std,
            "wall_clock": self.wall_clock,
            "runs": [r.to_dict() for r in self.runs],
        }


# --------------------------------------------------------------------------- data


_DATA_CACHE: dict = {}


def prepare_data(cfg: ExperimentConfig, seed: int = 0) -> Dataset:
    """Generate or load the dataset; synthetic datasets are cached per resolved generator config."""
    dc = cfg.data
    if dc.path is not None:
        key = ("path", str(Path(dc.path).resolve()))
        if key not in _DATA_CACHE:
            _DATA_CACHE[key] = load_dataset(dc.path)
        ds = _DATA_CACHE[key]
    else:
        synth = dataclasses.replace(dc.synthetic, embed_dim=cfg.model.embed_dim)
        if dc.reseed:
            synth = dataclasses.replace(synth, seed=synth.seed + seed)
        key = ("synth", json.dumps(dataclasses.asdict(synth), sort_keys=True))
        if key not in _DATA_CACHE:
            if len(_DATA_CACHE) > 8:
                _DATA_CACHE.clear()
            _DATA_CACHE[key] = generate_synthetic(synth)
        ds = _DATA_CACHE[key]
    if ds.target_schema.embed_dim != cfg.model.embed_dim:
        ds = dataclasses.replace(ds, source_schema=ds.source_schema.with_embed_dim(cfg.model.embed_dim),
                                 target_schema=ds.target_schema.with_embed_dim(cfg.model.embed_dim))
    return ds


def split_validation(part: Batch, fraction: float, seed: int) -> tuple[Batch, Batch | None]:
    if fraction <= 0 or len(part) < 2:
        return part, None
    n_val = max(1, int(round(fraction * len(part))))
    order = component_rng(seed, "split/validation").permutation(len(part))
    val = np.sort(order[:n_val])
    train = np.sort(order[n_val:])
    return part.take(train), part.take(val)


# --------------------------------------------------------------------------- loop


class _Stopper:
    def __init__(self, patience: int | None):
        self.patience = patience
        self.best = -math.inf
        self.bad = 0

    def update(self, report: EvalReport | None) -> bool:
        """Record a validation result; True means stop."""
        if self.patience is None or report is None or not report.auc_defined:
            return False
        if report.auc > self.best:
            self.best, self.bad = report.auc, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


def _epoch_loop(cfg: ExperimentConfig, seed: int, target_train: Batch, val: Batch | None, test: Batch,
                step_fn: Callable[[Batch, int], dict], eval_tower: Callable[[], Tower], run: SeedRun,
                emit: Logger) -> None:
    from .data import epoch_batches

    t = cfg.train
    stopper = _Stopper(t.patience)
    step = 0
    for epoch in range(t.epochs):
        for batch in epoch_batches(target_train, t.batch_size_target, seed, epoch, "target/train"):
            if t.max_steps is not None and step >= t.max_steps:
                break
            rec = step_fn(batch, step)
            step += 1
            rec = {"type": "step", "seed": seed, "step": step, "epoch": epoch, **rec}
            run.trace.append(rec)
            emit(rec)
        tower = eval_tower()
        report = evaluate(tower, test, epoch=epoch, step=step)
        val_report = evaluate(tower, val, epoch=epoch, step=step) if val is not None and len(val) else None
        entry = {"epoch": epoch, "step": step, "test": report.to_dict(),
                 "val": None if val_report is None else val_report.to_dict()}
        run.epochs.append(entry)
        emit({"type": "epoch", "seed": seed, **entry})
        if stopper.update(val_report) or (t.max_steps is not None and step >= t.max_steps):
            break
    run.steps = step


def _final_eval(run: SeedRun, tower: Tower, test: Batch, emit: Logger, seed: int) -> None:
    report = evaluate(tower, test, step=run.steps)
    run.final = report.to_dict()
    emit({"type": "final", "seed": seed, **run.final})


# --------------------------------------------------------------------------- methods


def build_cctl(cfg: ExperimentConfig, ds: Dataset, seed: int) -> tuple[ScnState, IfnState]:
    c, m = cfg.cctl, cfg.model
    state = ScnState.create(ds.target_schema, ds.source_schema, m.tower_widths, seed, lr=cfg.train.lr,
                            sync_interval=c.sync_interval, sync_moments=c.sync_moments)
    san = SanParams.init(ds.source_schema, ds.target_schema, seed, mode=c.san_mode, hidden=tuple(m.san_hidden))
    fixed = c.fixed_weight
    if cfg.method == "naive_mixed" or c.disable_ifn:
        fixed = 1.0 if fixed is None else fixed
    selector = None if fixed is not None else init_selector(ds.target_schema.input_width, m.selector_widths, seed)
    buffer = RewardBuffer(gamma=c.gamma, update_interval=c.update_interval, alpha=c.alpha,
                          baseline=c.reward_baseline)
    ifn = IfnState(san, selector, buffer, mode=c.selector_mode, fixed_weight=fixed,
                   rng=component_rng(seed, "selector/actions"))
    return state, ifn


def effective_beta(cfg: ExperimentConfig) -> float:
    if cfg.method == "naive_mixed" or cfg.cctl.disable_ren:
        return 0.0
    return cfg.cctl.beta


def selector_mean_p(ifn: IfnState, state: ScnState, part: Batch, limit: int = 5000) -> float | None:
    """Mean selector output over (up to ``limit``) source training samples."""
    if not ifn.learns or len(part) == 0:
        return None if not ifn.learns else math.nan
    sub = part.take(slice(0, limit))
    x, _ = align_batch(ifn.san, embed_groups(state.mixed.source, sub))
    p, _ = selector_weight(ifn.selector, x)
    return float(p.mean())


def _train_cctl(cfg, ds, seed, run, emit, train, val, test):
    state, ifn = build_cctl(cfg, ds, seed)
    beta = effective_beta(cfg)
    src = ds.part("source", "train")
    stream = BatchStream(src, cfg.train.batch_size_source, seed, "source/train") if len(src) else None

    def step_fn(batch, _):
        res = train_step(state, ifn, batch, next(stream) if stream is not None else None, beta=beta,
                         ren_item_pairs=cfg.cctl.ren_item_pairs)
        L = res.losses
        run.rewards.append(L.r)
        rec = {"loss_src": L.loss_src, "loss_tgt": L.loss_tgt, "loss_pure": L.loss_pure, "r": L.r,
               "loss_ren": L.loss_ren, "ren_pairs": L.ren_pairs,
               "mean_p": float(res.p.mean()) if len(res.p) else None}
        if res.update is not None:
            u = dataclasses.asdict(res.update)
            run.selector.append(u)
            emit({"type": "selector", "seed": seed, **u})
        return rec

    try:
        _epoch_loop(cfg, seed, train, val, test, step_fn, lambda: state.pure, run, emit)
    finally:
        run.steps = state.step
    if not state.synced:
        sync_params(state)
    run.selector_mean_p = selector_mean_p(ifn, state, src)
    return state.pure, state


def _single_domain_step(tower: Tower, opt: AdamState):
    def step_fn(batch, _):
        bundle = GradientBundle()
        loss, tape = forward_target(tower, batch)
        if not np.isfinite(loss):
            raise NonFiniteError("non-finite target loss", component="tower.loss")
        backward_target(tower, tape, bundle)
        adam_step(opt, tower, bundle)
        return {"loss_pure": loss}
    return step_fn


def _train_pure(cfg, ds, seed, run, emit, train, val, test):
    if cfg.method == "pure_dnn" and len(ds.part("source", "train")):
        msg = "pure_dnn ignores the configured source-domain data"
        log.warning(msg)
        run.warnings.append(msg)
    tower = init_tower(ds.target_schema, cfg.model.tower_widths, seed)
    opt = AdamState(lr=cfg.train.lr)
    _epoch_loop(cfg, seed, train, val, test, _single_domain_step(tower, opt), lambda: tower, run, emit)
    return tower, None


def _train_lr(cfg, ds, seed, run, emit, train, val, test):
    schema = ds.target_schema.with_embed_dim(1)
    tower = init_tower(schema, [1], seed)
    opt = AdamState(lr=cfg.train.lr)
    _epoch_loop(cfg, seed, train, val, test, _single_domain_step(tower, opt), lambda: tower, run, emit)
    return tower, None


def pretrain_on_source(tower_mlp, san: SanParams, source: EmbeddingTables, part: Batch, cfg: ExperimentConfig,
                       seed: int, emit: Logger) -> int:
    """Fit MLP + SAN + source tables on aligned source samples; returns the number of steps."""
    opt = AdamState(lr=cfg.train.lr)

    class _Group:
        def parameters(self):
            out = tower_mlp.parameters("mlp.")
            out.update(san.parameters("san."))
            out.update(source.parameters("emb.source."))
            return out

        def bump(self):
            tower_mlp.bump()
            san.bump()
            source.bump()

    from .data import epoch_batches
    from .features import embed_backward

    group, step = _Group(), 0
    for epoch in range(cfg.train.pretrain_epochs):
        for batch in epoch_batches(part, cfg.train.batch_size_source, seed, epoch, "source/pretrain"):
            x, san_tapes = align_batch(san, embed_groups(source, batch))
            p, tape = mlp_forward(tower_mlp, x)
            p = p[:, 0]
            loss = float(np.mean(bce(p, batch.labels)))
            g, gin = mlp_backward(tower_mlp, tape, (bce_grad(p, batch.labels) / len(batch))[:, None])
            bundle = GradientBundle()
            bundle.add_all(g, "mlp.")
            sg, tg = align_backward(san, san_tapes, gin)
            bundle.add_all(sg, "san.")
            embed_backward(source, batch, tg, bundle, "emb.source.")
            adam_step(opt, group, bundle)
            step += 1
            emit({"type": "pretrain", "seed": seed, "step": step, "loss_src": loss})
    return step


def _train_finetune(cfg, ds, seed, run, emit, train, val, test):
    tower = init_tower(ds.target_schema, cfg.model.tower_widths, seed)
    if cfg.train.pretrain_epochs > 0:
        source = EmbeddingTables.init(ds.source_schema, seed, "emb/source")
        san = SanParams.init(ds.source_schema, ds.target_schema, seed, mode=cfg.cctl.san_mode,
                             hidden=tuple(cfg.model.san_hidden))
        pretrain_on_source(tower.mlp, san, source, ds.part("source", "train"), cfg, seed, emit)
    opt = AdamState(lr=cfg.train.lr)
    _epoch_loop(cfg, seed, train, val, test, _single_domain_step(tower, opt), lambda: tower, run, emit)
    return tower, None


TRAINERS = {
    "cctl": _train_cctl,
    "naive_mixed": _train_cctl,
    "pure_dnn": _train_pure,
    "lr": _train_lr,
    "finetune": _train_finetune,
}


def run_seed(cfg: ExperimentConfig, seed: int, emit: Logger | None = None, model_path=None) -> SeedRun:
    emit = emit or (lambda rec: None)
    t0 = time.perf_counter()
    ds = prepare_data(cfg, seed)
    run = SeedRun(seed, cfg.method)
    train, val = split_validation(ds.part("target", "train"), cfg.train.val_fraction, seed)
    test = ds.part("target", "test")
    try:
        tower, state = TRAINERS[cfg.method](cfg, ds, seed, run, emit, train, val, test)
        _final_eval(run, tower, test, emit, seed)
        if model_path is not None:
            meta = {"method": cfg.method, "seed": seed}
            if state is not None:
                export_pure_tower(state, model_path, cfg.hash(), meta)
            else:
                write_tower(tower, model_path, {"step": run.steps, "sync_step": run.steps,
                                                "config_hash": cfg.hash(), "warnings": [], **meta})
    except (NonFiniteError, FloatingPointError) as e:
        run.failed = True
        run.error = f"{type(e).__name__}: {e}"
        emit({"type": "failure", "seed": seed, "error": run.error,
              "component": getattr(e, "component", "")})
        log.error("seed %d failed: %s", seed, run.error)
    run.wall_clock = time.perf_counter() - t0
    return run


def run_experiment(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> RunReport:
    """Train ``cfg.method`` once per seed; optionally persist the run directory.

    The directory (``<output_dir>/<hash>-<timestamp>`` unless ``out_dir`` is given) receives
    config.json, metrics.jsonl, report.json, and one exported model per seed.
    """
    cfg.validate()
    t0 = time.perf_counter()
    run_dir = None
    fh = None
    if write:
        run_dir = Path(out_dir) if out_dir else Path(cfg.output_dir) / (
            f"{cfg.hash()}-{datetime.now().strftime('%Y%m%d-%H%M%S')}")
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        fh = open(run_dir / "metrics.jsonl", "w")

    def emit(rec: dict) -> None:
        if fh is not None:
            fh.write(json.dumps({"config_hash": cfg.hash(), **rec}) + "\n")

    try:
        runs = [run_seed(cfg, seed, emit, None if run_dir is None else run_dir / f"model_seed{seed}.json")
                for seed in cfg.seeds]
    finally:
        if fh is not None:
            fh.close()
    report = RunReport.aggregate(cfg, runs, time.perf_counter() - t0)
    if run_dir is not None:
        report.out_dir = str(run_dir)
        (run_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


def train_baseline(kind: str, cfg: ExperimentConfig, **kwargs) -> RunReport:
    if kind not in ("lr", "pure_dnn", "finetune"):
        raise ValueError(f"unknown baseline {kind!r}")
    return run_experiment(cfg.replace(method=kind), **kwargs)


SWEEP_COLUMNS = ["value", "auc_mean", "auc_std", "logloss_mean", "logloss_std", "n_seeds", "failed", "config_hash"]


def sweep(param: str, values, base: ExperimentConfig, out_csv=None, write_runs: bool = False,
          out_dir=None) -> list[dict]:
    """One multi-seed run per value (same seeds throughout); rows optionally written as CSV."""
    rows = []
    for value in values:
        cfg = base.replace(**{param: value})
        sub = None if out_dir is None else Path(out_dir) / f"{param}={value}"
        rep = run_experiment(cfg, out_dir=sub, write=write_runs)
        rows.append({"value": value, "auc_mean": rep.auc_mean, "auc_std": rep.auc_std,
                     "logloss_mean": rep.logloss_mean, "logloss_std": rep.logloss_std,
                     "n_seeds": len(rep.runs), "failed": rep.failed, "config_hash": rep.config_hash})
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows


def set_param(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    out = cfg.replace()
    set_path(out, param, value)
    return out.validate()
