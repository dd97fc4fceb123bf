"""Experiment configuration: JSON in, strict dataclasses out.

Unknown keys are errors at every nesting level. ``config_hash`` covers the fully resolved
config (defaults included), so two files that resolve identically share a hash.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig

METHODS = ("cctl", "pure_dnn", "lr", "finetune", "naive_mixed")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    embed_dim: int = 8
    tower_widths: list = field(default_factory=lambda: [256, 128, 32, 1])
    selector_widths: list = field(default_factory=lambda: [64, 16, 1])
    san_hidden: list = field(default_factory=lambda: [32])


@dataclass
class TrainConfig:
    batch_size_target: int = 128
    batch_size_source: int = 128
    epochs: int = 20
    max_steps: int | None = None
    lr: float = 1e-3
    patience: int | None = 3
    val_fraction: float = 0.1
    pretrain_epochs: int = 1
    eval_batch_size: int = 8192


@dataclass
class CctlConfig:
    sync_interval: int = 100
    update_interval: int = 100
    gamma: float = 0.8
    alpha: float = 0.5
    beta: float = 0.1
    selector_mode: str = "continuous"
    san_mode: str = "auto"
    reward_baseline: str = "none"
    sync_moments: str = "copy"
    disable_ifn: bool = False
    disable_ren: bool = False
    fixed_weight: float | None = None
    ren_item_pairs: bool = False


@dataclass
class DataConfig:
    synthetic: SynthConfig | None = field(default_factory=SynthConfig)
    path: str | None = None
    reseed: bool = False


@dataclass
class ExperimentConfig:
    method: str = "cctl"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cctl: CctlConfig = field(default_factory=CctlConfig)
    output_dir: str = "runs"
    name: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.data.path is None and self.data.synthetic is None:
            raise ConfigError("data needs either 'synthetic' or 'path'")
        if self.data.synthetic is not None:
            try:
                self.data.synthetic.validate()
            except ValueError as e:
                raise ConfigError(f"data.synthetic: {e}") from None
        t, c, m = self.train, self.cctl, self.model
        if t.batch_size_target <= 0 or t.batch_size_source <= 0:
            raise ConfigError("batch sizes must be positive")
        if t.epochs < 0 or (t.max_steps is not None and t.max_steps < 0):
            raise ConfigError("epochs and max_steps must be nonnegative")
        if not 0.0 <= t.val_fraction < 1.0:
            raise ConfigError("train.val_fraction must lie in [0, 1)")
        if c.sync_interval < 1 or c.update_interval < 1:
            raise ConfigError("cctl.sync_interval and cctl.update_interval must be positive")
        if not 0.0 <= c.gamma <= 1.0:
            raise ConfigError("cctl.gamma must lie in [0, 1]")
        if c.alpha < 0 or c.beta < 0:
            raise ConfigError("cctl.alpha and cctl.beta must be nonnegative")
        if c.selector_mode not in ("continuous", "sampled"):
            raise ConfigError("cctl.selector_mode must be 'continuous' or 'sampled'")
        if c.san_mode not in ("auto", "identity", "mlp", "mixed"):
            raise ConfigError("cctl.san_mode must be one of auto, identity, mlp, mixed")
        if c.reward_baseline not in ("none", "mean"):
            raise ConfigError("cctl.reward_baseline must be 'none' or 'mean'")
        if c.sync_moments not in ("copy", "reset"):
            raise ConfigError("cctl.sync_moments must be 'copy' or 'reset'")
        if c.fixed_weight is not None and not 0.0 <= c.fixed_weight <= 1.0:
            raise ConfigError("cctl.fixed_weight must lie in [0, 1]")
        if m.embed_dim <= 0 or not m.tower_widths or m.tower_widths[-1] != 1:
            raise ConfigError("model.tower_widths must end with a width-1 head and embed_dim must be positive")
        if not m.selector_widths or m.selector_widths[-1] != 1:
            raise ConfigError("model.selector_widths must end with a width-1 head")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"cctl.alpha": 0.0})``."""
        out = copy.deepcopy(self)
        for path, value in changes.items():
            set_path(out, path, value)
        return out.validate()


def _build(cls, data, where: str):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        inner = _dataclass_in(hints[name])
        kwargs[name] = _build(inner, value, f"{where}{name}.") if inner is not None else value
    return cls(**kwargs)


def _dataclass_in(hint):
    if dataclasses.is_dataclass(hint):
        return hint
    for arg in typing.get_args(hint):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    if cfg.data.path is not None and "synthetic" not in (data.get("data") or {}):
        cfg.data.synthetic = None
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return from_dict(data)


def set_path(cfg, path: str, value) -> None:
    """Assign ``value`` at a dotted path; the path must name an existing documented knob."""
    parts = path.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, p):
            raise ConfigError(f"unknown config key {path!r}")
        obj = getattr(obj, p)
    if not dataclasses.is_dataclass(obj) or parts[-1] not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {path!r}")
    setattr(obj, parts[-1], value)


def json_schema() -> dict:
    """JSON Schema (draft 2020-12) describing the config file, generated from the dataclasses."""

    def describe(cls) -> dict:
        hints = typing.get_type_hints(cls)
        props = {}
        for f in dataclasses.fields(cls):
            inner = _dataclass_in(hints[f.name])
            if inner is not None:
                props[f.name] = describe(inner)
                continue
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            props[f.name] = {"type": _json_type(hints[f.name]), "default": default}
        return {"type": "object", "additionalProperties": False, "properties": props}

    schema = describe(ExperimentConfig)
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["properties"]["method"]["enum"] = list(METHODS)
    return schema


def _json_type(hint):
    names = {int: "integer", float: "number", bool: "boolean", str: "string", list: "array", type(None): "null"}
    args = typing.get_args(hint) or (hint,)
    out = [names[a] for a in args if a in names]
    if "integer" in out and "number" not in out and float in args:
        out.append("number")
    return out[0] if len(out) == 1 else out
