"""Source-to-target alignment, per-sample selector weights, and the REINFORCE selector update."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .features import TOKENS, FeatureSchema, TokenVectors
from .numerics import MlpParams, ShapeError, component_rng, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

P_CLAMP = 1e-6


class SanParams:
    """One MLP per token mapping a source token onto the target token width.

    A token whose net is ``None`` passes through unchanged (identical layouts).
    """

    def __init__(self, source: FeatureSchema, target: FeatureSchema, nets: dict):
        for tok in TOKENS:
            net = nets.get(tok)
            sw, tw = source.group_width(tok), target.group_width(tok)
            if net is None:
                if sw != tw:
                    raise ShapeError(f"identity alignment for {tok!r} needs equal widths, got {sw} -> {tw}")
            elif net.in_width != sw or net.out_width != tw:
                raise ShapeError(f"{tok!r} net maps {net.in_width}->{net.out_width}, schemas need {sw}->{tw}")
        self.source = source
        self.target = target
        self.nets = {tok: nets.get(tok) for tok in TOKENS}
        self.version = 0

    @classmethod
    def init(cls, source: FeatureSchema, target: FeatureSchema, seed: int, mode: str = "auto",
             hidden=(32,)) -> "SanParams":
        if mode == "auto":
            mode = "identity" if source.same_layout(target) else "mlp"
        nets = {}
        for tok in TOKENS:
            sw, tw = source.group_width(tok), target.group_width(tok)
            if mode == "identity" or (mode == "mixed" and sw == tw):
                nets[tok] = None
            elif mode in ("mlp", "mixed"):
                nets[tok] = MlpParams.init(sw, [*hidden, tw], component_rng(seed, f"san/{tok}"), head="identity")
            else:
                raise ValueError(f"unknown SAN mode {mode!r}")
        return cls(source, target, nets)

    @classmethod
    def identity_init(cls, source: FeatureSchema, target: FeatureSchema) -> "SanParams":
        """Single linear layer per token with identity weights (requires equal widths)."""
        from .numerics import Layer

        nets = {}
        for tok in TOKENS:
            w = source.group_width(tok)
            if w != target.group_width(tok):
                raise ShapeError(f"identity init needs equal widths for {tok!r}")
            nets[tok] = MlpParams([Layer(np.eye(w), np.zeros(w), "identity")])
        return cls(source, target, nets)

    @property
    def is_identity(self) -> bool:
        return all(n is None for n in self.nets.values())

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for tok, net in self.nets.items():
            if net is not None:
                out.update(net.parameters(f"{prefix}{tok}."))
        return out

    def bump(self) -> None:
        self.version += 1
        for net in self.nets.values():
            if net is not None:
                net.bump()


def align_source(san: SanParams, tokens: TokenVectors) -> np.ndarray:
    out = []
    for tok in TOKENS:
        v = np.asarray(tokens[tok], dtype=np.float64)
        if len(v) != san.source.group_width(tok):
            raise ShapeError(f"source {tok!r} token has width {len(v)}, expected {san.source.group_width(tok)}")
        net = san.nets[tok]
        out.append(v if net is None else mlp_forward(net, v)[0])
    return np.concatenate(out)


def align_batch(san: SanParams, groups: dict[str, np.ndarray]) -> tuple[np.ndarray, dict]:
    parts, tapes = [], {}
    for tok in TOKENS:
        net = san.nets[tok]
        if net is None:
            parts.append(groups[tok])
        else:
            y, tapes[tok] = mlp_forward(net, groups[tok])
            parts.append(y)
    return np.concatenate(parts, axis=1), tapes


def align_backward(san: SanParams, tapes: dict, grad: np.ndarray) -> tuple[dict, dict]:
    """Gradients of SAN parameters (prefixed by token) and of each source token."""
    offs = san.target.offsets()
    param_grads, token_grads = {}, {}
    for tok in TOKENS:
        g = grad[:, offs[tok]]
        net = san.nets[tok]
        if net is None:
            token_grads[tok] = g
        else:
            pg, token_grads[tok] = mlp_backward(net, tapes[tok], g)
            param_grads.update({f"{tok}.{k}": v for k, v in pg.items()})
    return param_grads, token_grads


# --------------------------------------------------------------------------- selector


def init_selector(in_width: int, widths, seed: int) -> MlpParams:
    """Hidden layers Glorot-initialised; the sigmoid head starts at zero so every p starts at 0.5."""
    return MlpParams.init(in_width, widths, component_rng(seed, "selector"), head="sigmoid", zero_head=True)


def selector_weight(sel: MlpParams, aligned) -> tuple[np.ndarray, object]:
    """Selector probabilities clamped into [1e-6, 1 - 1e-6], plus the forward tape."""
    p, tape = mlp_forward(sel, aligned)
    return np.clip(p[..., 0], P_CLAMP, 1.0 - P_CLAMP), tape


def log_policy_grads(sel: MlpParams, tape, coef: np.ndarray, actions: np.ndarray | None = None) -> dict:
    """Gradient of ``sum_i coef_i * log pi_i`` where pi_i = p_i (continuous) or Bernoulli(a_i; p_i)."""
    p = tape.post[-1][:, 0]
    if actions is None:
        dp = coef / np.maximum(p, 1e-300)
    else:
        dp = coef * (actions / np.maximum(p, 1e-300) - (1.0 - actions) / np.maximum(1.0 - p, 1e-300))
    grads, _ = mlp_backward(sel, tape, dp[:, None])
    return grads


def accumulate_rewards(rewards, gamma: float) -> np.ndarray:
    """Discounted tail sums within a window: out[k] = r[k] + gamma * out[k+1]."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for k in range(len(r) - 1, -1, -1):
        acc = r[k] + gamma * acc
        out[k] = acc
    return out


@dataclass
class LoggedStep:
    step: int
    reward: float
    inputs: np.ndarray
    p: np.ndarray
    actions: np.ndarray | None = None


@dataclass
class RewardBuffer:
    gamma: float = 0.8
    update_interval: int = 1000
    alpha: float = 0.5
    baseline: str = "none"
    entries: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.update_interval < 1:
            raise ValueError("update_interval must be positive")
        if self.baseline not in ("none", "mean"):
            raise ValueError(f"unknown reward baseline {self.baseline!r}")

    def record(self, step: int, reward: float, inputs: np.ndarray, p: np.ndarray, actions=None) -> None:
        self.entries.append(LoggedStep(step, float(reward), np.array(inputs, dtype=np.float64),
                                       np.array(p, dtype=np.float64),
                                       None if actions is None else np.array(actions, dtype=np.float64)))

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


@dataclass
class UpdateStats:
    step: int
    n_samples: int
    mean_p: float
    r_accu_mean: float
    r_accu_min: float
    r_accu_max: float
    reward_mean: float
    hist: list
    applied: bool = True


HIST_BINS = 20


def reinforce_update(buffer: RewardBuffer, sel: MlpParams) -> UpdateStats | None:
    """Gradient ascent on the selector: theta += alpha/N * sum_i grad log p_i * r_accu(step_i).

    Clears the buffer. Returns None for an empty window.
    """
    if not buffer.entries:
        return None
    entries = sorted(buffer.entries, key=lambda e: e.step)
    buffer.clear()
    r_accu = accumulate_rewards([e.reward for e in entries], buffer.gamma)
    inputs = [e.inputs for e in entries if len(e.inputs)]
    p_all = np.concatenate([e.p for e in entries]) if entries else np.zeros(0)
    hist = np.histogram(p_all, bins=HIST_BINS, range=(0.0, 1.0))[0].tolist()
    stats = UpdateStats(
        step=entries[-1].step, n_samples=len(p_all), mean_p=float(p_all.mean()) if len(p_all) else float("nan"),
        r_accu_mean=float(r_accu.mean()), r_accu_min=float(r_accu.min()), r_accu_max=float(r_accu.max()),
        reward_mean=float(np.mean([e.reward for e in entries])), hist=hist,
    )
    if not np.all(np.isfinite(r_accu)):
        log.warning("non-finite accumulated reward at step %d; selector update skipped", stats.step)
        stats.applied = False
        return stats
    if not inputs:
        stats.applied = False
        return stats
    coef = np.concatenate([np.full(len(e.inputs), r_accu[k]) for k, e in enumerate(entries) if len(e.inputs)])
    if buffer.baseline == "mean":
        coef = coef - coef.mean()
    n = len(coef)
    x = np.concatenate(inputs)
    sampled = entries[0].actions is not None
    actions = np.concatenate([e.actions for e in entries if len(e.inputs)]) if sampled else None
    _, tape = mlp_forward(sel, x)
    grads = log_policy_grads(sel, tape, coef / n, actions)
    params = sel.parameters()
    for name, g in grads.items():
        params[name] += buffer.alpha * g
    sel.bump()
    return stats


@dataclass
class IfnState:
    """Everything the information-flow side owns during training.

    ``fixed_weight`` switches the selector off: every source sample gets that weight and no
    REINFORCE update runs (used for naive mixing and the without-IFN ablation).
    """

    san: SanParams
    selector: MlpParams | None
    buffer: RewardBuffer
    mode: str = "continuous"
    fixed_weight: float | None = None
    rng: np.random.Generator | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("continuous", "sampled"):
            raise ValueError(f"unknown selector mode {self.mode!r}")
        if self.fixed_weight is None and self.selector is None:
            raise ValueError("a selector network is required unless fixed_weight is set")
        if self.fixed_weight is not None and not 0.0 <= self.fixed_weight <= 1.0:
            raise ValueError("fixed_weight must lie in [0, 1]")

    @property
    def learns(self) -> bool:
        return self.fixed_weight is None

    def weights(self, aligned: np.ndarray):
        """Loss weights, selector probabilities, and sampled actions (or None)."""
        n = len(aligned)
        if self.fixed_weight is not None:
            w = np.full(n, float(self.fixed_weight))
            return w, w, None
        p, _ = selector_weight(self.selector, aligned)
        if self.mode == "sampled":
            actions = (self.rng.random(n) < p).astype(np.float64)
            return actions, p, actions
        return p, p, None
