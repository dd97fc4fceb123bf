"""Twin-tower training: a mixed tower fed target plus weighted source samples, a pure tower fed
target samples only, their loss gap as the reward, and periodic mixed->pure synchronisation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import (Batch, EmbeddingTables, FeatureSchema, embed_backward, embed_batch, embed_groups,
                       split_tokens, validate_batch)
from .ifn import IfnState, align_backward, align_batch, reinforce_update
from .numerics import (AdamState, GradientBundle, Layer, MlpParams, NonFiniteError, ShapeError, adam_step, bce,
                       bce_grad, component_rng, mlp_backward, mlp_forward)
from .ren import batch_ren

log = logging.getLogger(__name__)

EXPORT_FORMAT = "cctl-pure-tower"


class Tower:
    """Embedding tables plus an MLP with a width-1 sigmoid head."""

    def __init__(self, target: EmbeddingTables, mlp: MlpParams, source: EmbeddingTables | None = None):
        if mlp.in_width != target.schema.input_width:
            raise ShapeError(f"MLP input width {mlp.in_width} != target input width {target.schema.input_width}")
        if mlp.out_width != 1 or mlp.layers[-1].activation != "sigmoid":
            raise ShapeError("a CTR tower needs a width-1 sigmoid head")
        self.target = target
        self.source = source
        self.mlp = mlp

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = self.mlp.parameters(prefix + "mlp.")
        out.update(self.target.parameters(prefix + "emb.target."))
        if self.source is not None:
            out.update(self.source.parameters(prefix + "emb.source."))
        return out

    def bump(self) -> None:
        self.mlp.bump()
        self.target.bump()
        if self.source is not None:
            self.source.bump()

    def predict(self, batch: Batch, chunk: int = 8192) -> np.ndarray:
        out = [mlp_forward(self.mlp, embed_batch(self.target, batch.take(slice(i, i + chunk))))[0][:, 0]
               for i in range(0, len(batch), chunk)]
        return np.concatenate(out) if out else np.zeros(0)


def init_tower(target_schema: FeatureSchema, widths, seed: int, source_schema: FeatureSchema | None = None,
               zero_head: bool = False) -> Tower:
    """Tower with parameters drawn from named streams, so every trainer sharing a seed starts alike."""
    target = EmbeddingTables.init(target_schema, seed, "emb/target")
    source = None if source_schema is None else EmbeddingTables.init(source_schema, seed, "emb/source")
    mlp = MlpParams.init(target_schema.input_width, widths, component_rng(seed, "tower/mlp"), zero_head=zero_head)
    return Tower(target, mlp, source)


class ParamGroup:
    """Several parameter owners optimised together under distinct name prefixes."""

    def __init__(self, **members):
        self.members = members

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m in self.members.items():
            out.update(m.parameters(f"{name}." if name else ""))
        return out

    def bump(self) -> None:
        for m in self.members.values():
            m.bump()


# --------------------------------------------------------------------------- losses


@dataclass
class TowerTape:
    batch: Batch
    mlp_tape: object
    p: np.ndarray
    weights: np.ndarray


def _mean_bce(p, y, w) -> float:
    return float(np.mean(bce(p, y, w))) if len(p) else 0.0


def forward_target(tower: Tower, batch: Batch) -> tuple[float, TowerTape]:
    if len(batch) == 0:
        raise ValueError("empty target batch")
    x = embed_batch(tower.target, batch)
    p, tape = mlp_forward(tower.mlp, x)
    p = p[:, 0]
    w = np.ones(len(batch))
    return _mean_bce(p, batch.labels, w), TowerTape(batch, tape, p, w)


def backward_target(tower: Tower, tape: TowerTape, bundle: GradientBundle, scale: float = 1.0) -> None:
    n = len(tape.batch)
    dp = scale * bce_grad(tape.p, tape.batch.labels, tape.weights) / n
    g, gin = mlp_backward(tower.mlp, tape.mlp_tape, dp[:, None])
    bundle.add_all(g, "mlp.")
    embed_backward(tower.target, tape.batch, split_tokens(tower.target.schema, gin), bundle, "emb.target.")


def pure_forward_loss(pure: Tower, target_batch: Batch) -> tuple[float, TowerTape]:
    """Mean unweighted BCE of the pure tower on a target batch."""
    return forward_target(pure, target_batch)


def mixed_forward_loss(mixed: Tower, target_batch: Batch, aligned_source) -> tuple[float, float, dict]:
    """Target and source losses of the mixed tower.

    ``aligned_source`` is ``(vectors (n, W), weights (n,), labels (n,))``. Returns
    ``(loss_tgt, loss_src, tapes)``; loss_src is the mean of weight * BCE.
    """
    loss_tgt, t_tape = forward_target(mixed, target_batch)
    x, w, y = aligned_source
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(len(w), -1)
    if np.any((w < 0) | (w > 1)):
        raise ValueError("source weights must lie in [0, 1]")
    tapes = {"target": t_tape}
    if len(w) == 0:
        return loss_tgt, 0.0, tapes
    if x.shape[1] != mixed.mlp.in_width:
        raise ShapeError(f"aligned source width {x.shape[1]} != tower input width {mixed.mlp.in_width}")
    p, tape = mlp_forward(mixed.mlp, x)
    p = p[:, 0]
    tapes["source"] = (tape, p, np.asarray(y, dtype=np.float64), w)
    return loss_tgt, _mean_bce(p, y, w), tapes


def information_gain(loss_pure: float, loss_tgt: float) -> float:
    """Positive when the source-influenced mixed tower fits the target batch better."""
    return loss_pure - loss_tgt


def is_negative_transfer(r: float) -> bool:
    return r <= 0.0


# --------------------------------------------------------------------------- state


@dataclass
class StepLosses:
    loss_src: float
    loss_tgt: float
    loss_pure: float
    r: float
    loss_ren: float = 0.0
    ren_pairs: int = 0

    @property
    def loss_mixed(self) -> float:
        return self.loss_src + self.loss_tgt


@dataclass
class ScnState:
    mixed: Tower
    pure: Tower
    mixed_opt: AdamState
    pure_opt: AdamState
    sync_interval: int = 1000
    step: int = 0
    last_sync: int = 0
    sync_moments: str = "copy"

    def __post_init__(self):
        if self.sync_interval < 1:
            raise ValueError("sync_interval must be positive")
        if self.sync_moments not in ("copy", "reset"):
            raise ValueError(f"unknown sync_moments policy {self.sync_moments!r}")
        if self.mixed.mlp.widths != self.pure.mlp.widths:
            raise ShapeError("mixed and pure towers must share the MLP shape")

    @classmethod
    def create(cls, target_schema: FeatureSchema, source_schema: FeatureSchema, widths, seed: int,
               lr: float = 1e-3, sync_interval: int = 1000, sync_moments: str = "copy") -> "ScnState":
        """Both towers start from the same draw (a sync at step 0)."""
        mixed = init_tower(target_schema, widths, seed, source_schema)
        pure = Tower(mixed.target.copy(), mixed.mlp.copy())
        return cls(mixed, pure, AdamState(lr=lr), AdamState(lr=lr), sync_interval, sync_moments=sync_moments)

    @property
    def synced(self) -> bool:
        return self.last_sync == self.step


_SHARED_PREFIXES = ("mlp.", "emb.target.")


def sync_params(state: ScnState) -> ScnState:
    """Copy the mixed MLP and target tables onto the pure tower; source tables and IFN stay put."""
    mixed, pure = state.mixed, state.pure
    if mixed.mlp.widths != pure.mlp.widths or mixed.mlp.in_width != pure.mlp.in_width:
        raise ShapeError("tower shapes diverged; cannot synchronise")
    pure.mlp.copy_from(mixed.mlp)
    pure.target.copy_from(mixed.target)
    if state.sync_moments == "reset":
        state.pure_opt.reset()
    else:
        opt = state.pure_opt
        opt.m = {k: v.copy() for k, v in state.mixed_opt.m.items() if k.startswith(_SHARED_PREFIXES)}
        opt.v = {k: v.copy() for k, v in state.mixed_opt.v.items() if k.startswith(_SHARED_PREFIXES)}
        opt.step = state.mixed_opt.step
    state.last_sync = state.step
    return state


@dataclass
class StepResult:
    losses: StepLosses
    p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    update: object = None
    synced: bool = False


def _finite(value: float, component: str, step: int) -> None:
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite {component} at step {step}", component=component)


@dataclass
class MixedObjective:
    """Value and mixed-tower gradients of ``loss_tgt + loss_src + beta * loss_ren``."""

    loss_tgt: float
    loss_src: float
    loss_ren: float
    ren_pairs: int
    bundle: GradientBundle
    x_src: np.ndarray
    p: np.ndarray
    actions: np.ndarray | None
    ren_beta: float = 0.0

    @property
    def total(self) -> float:
        return self.loss_tgt + self.loss_src + self.ren_beta * self.loss_ren


def mixed_objective(mixed: Tower, ifn: IfnState, target_batch: Batch, source_batch: Batch | None,
                    beta: float = 0.1, ren_item_pairs: bool = False, step: int = 0) -> MixedObjective:
    """Forward and backward pass of the mixed tower, SAN, and REN on one batch pair.

    Selector weights are treated as constants (no gradient flows into the selector).
    """
    if len(target_batch) == 0:
        raise ValueError("empty target batch")
    validate_batch(mixed.target.schema, target_batch)
    has_source = source_batch is not None and len(source_batch) > 0
    loss_ren, n_pairs = 0.0, 0
    p_sel, x_src, actions, w = np.zeros(0), np.zeros((0, mixed.mlp.in_width)), None, np.zeros(0)
    labels_src = np.zeros(0)
    if has_source:
        validate_batch(mixed.source.schema, source_batch)
        x_src, san_tapes = align_batch(ifn.san, embed_groups(mixed.source, source_batch))
        _finite(float(np.sum(x_src)), "san.output", step)
        w, p_sel, actions = ifn.weights(x_src)
        labels_src = source_batch.labels
    loss_tgt, loss_src, tapes = mixed_forward_loss(mixed, target_batch, (x_src, w, labels_src))
    _finite(loss_tgt, "mixed_tower.loss_tgt", step)
    _finite(loss_src, "mixed_tower.loss_src", step)

    bundle = GradientBundle()
    backward_target(mixed, tapes["target"], bundle)
    if has_source:
        s_tape, s_p, s_y, s_w = tapes["source"]
        dp = bce_grad(s_p, s_y, s_w) / len(s_p)
        g, gin = mlp_backward(mixed.mlp, s_tape, dp[:, None])
        bundle.add_all(g, "mlp.")
        san_grads, token_grads = align_backward(ifn.san, san_tapes, gin)
        bundle.add_all(san_grads, "san.")
        embed_backward(mixed.source, source_batch, token_grads, bundle, "emb.source.")
        if beta > 0.0:
            loss_ren, n_pairs = batch_ren(mixed.target, mixed.source, target_batch, source_batch, bundle,
                                          scale=beta, item_pairs=ren_item_pairs)
            _finite(loss_ren, "ren.loss", step)
    return MixedObjective(loss_tgt, loss_src, loss_ren, n_pairs, bundle, x_src, p_sel, actions, beta)


def train_step(state: ScnState, ifn: IfnState, target_batch: Batch, source_batch: Batch | None,
               beta: float = 0.1, ren_item_pairs: bool = False) -> StepResult:
    """One joint update of both towers, the alignment network, and the reward bookkeeping.

    Selector weights enter the mixed loss as constants; the selector itself only moves in
    ``reinforce_update`` (every ``ifn.buffer.update_interval`` steps). Synchronisation fires
    when the completed step count is a multiple of ``state.sync_interval``.
    """
    mixed, pure = state.mixed, state.pure
    step = state.step
    obj = mixed_objective(mixed, ifn, target_batch, source_batch, beta, ren_item_pairs, step)
    loss_tgt, loss_src, loss_ren, n_pairs = obj.loss_tgt, obj.loss_src, obj.loss_ren, obj.ren_pairs
    x_src, p_sel, actions, bundle_m = obj.x_src, obj.p, obj.actions, obj.bundle

    bundle_p = GradientBundle()
    loss_pure, p_tape = pure_forward_loss(pure, target_batch)
    _finite(loss_pure, "pure_tower.loss_pure", step)
    backward_target(pure, p_tape, bundle_p)

    r = information_gain(loss_pure, loss_tgt)
    adam_step(state.mixed_opt, ParamGroup(**{"": mixed, "san": ifn.san}), bundle_m)
    adam_step(state.pure_opt, pure, bundle_p)
    state.step += 1

    update = None
    if ifn.learns:
        ifn.buffer.record(state.step, r, x_src, p_sel, actions)
        if state.step % ifn.buffer.update_interval == 0:
            update = reinforce_update(ifn.buffer, ifn.selector)
            if update is not None:
                ifn.history.append(update)
    synced = False
    if state.step % state.sync_interval == 0:
        sync_params(state)
        synced = True
    losses = StepLosses(loss_src, loss_tgt, loss_pure, r, loss_ren, n_pairs)
    return StepResult(losses, p_sel, update, synced)


# --------------------------------------------------------------------------- export


def export_pure_tower(state: ScnState, path, config_hash: str = "", extra: dict | None = None) -> dict:
    """Write the pure tower (target schema, target tables, MLP) as a JSON container."""
    return write_tower(state.pure, path, {
        "step": state.step,
        "sync_step": state.last_sync,
        "config_hash": config_hash,
        "warnings": [] if state.synced else [
            f"pure tower last synchronised at step {state.last_sync}, training ended at step {state.step}"],
        **(extra or {}),
    })


def write_tower(tower: Tower, path, metadata: dict) -> dict:
    params = tower.mlp.parameters("mlp.")
    params.update(tower.target.parameters("emb.target."))
    doc = {
        "format": EXPORT_FORMAT,
        "version": 1,
        "schema": tower.target.schema.to_dict(),
        "activations": [layer.activation for layer in tower.mlp.layers],
        "parameters": [{"name": k, "shape": list(v.shape), "values": v.ravel().tolist()} for k, v in params.items()],
        "metadata": metadata,
    }
    Path(path).write_text(json.dumps(doc))
    return doc


def load_tower(path) -> tuple[Tower, dict]:
    """Inverse of ``write_tower``; returns the tower and the metadata block."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != EXPORT_FORMAT:
        raise ValueError(f"{path}: not a {EXPORT_FORMAT} file")
    schema = FeatureSchema.from_dict(doc["schema"])
    arrays = {p["name"]: np.array(p["values"], dtype=np.float64).reshape(p["shape"]) for p in doc["parameters"]}
    layers = [Layer(arrays[f"mlp.{i}.weight"], arrays[f"mlp.{i}.bias"], act)
              for i, act in enumerate(doc["activations"])]
    tables = {f.name: arrays[f"emb.target.{f.name}"] for f in schema.fields}
    extra = set(arrays) - {f"mlp.{i}.{k}" for i in range(len(layers)) for k in ("weight", "bias")} \
        - {f"emb.target.{f.name}" for f in schema.fields}
    if extra:
        raise ValueError(f"{path}: unexpected parameter blocks {sorted(extra)}")
    return Tower(EmbeddingTables(schema, tables), MlpParams(layers)), doc["metadata"]
