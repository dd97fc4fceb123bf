"""Dense float64 kernels: MLP forward/backward, clamped cross-entropy, Adam, gradient checks.

Weights are stored ``(out, in)`` so a single sample obeys ``y = W x + b``; batches are
rows of a 2-D array and go through ``X @ W.T``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
ACTIVATIONS = ("relu", "sigmoid", "identity")


class ShapeError(ValueError):
    """Raised when array widths do not line up."""


class StaleTapeError(RuntimeError):
    """Raised when a tape is replayed against parameters that changed since the forward pass."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient contains inf/nan; ``component`` names the culprit."""

    def __init__(self, message: str, component: str = ""):
        super().__init__(message)
        self.component = component


def component_rng(seed: int, name: str) -> np.random.Generator:
    """PCG64 stream derived from ``seed`` and a component name.

    Streams for different names are independent, and adding a new component never shifts
    the draws of an existing one.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *words])))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if name == "relu":
        return grad * (pre > 0.0)
    if name == "sigmoid":
        return grad * post * (1.0 - post)
    return grad


# --------------------------------------------------------------------------- MLP


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weight rows {self.weight.shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class MlpParams:
    """Ordered stack of dense layers.

    ``version`` is bumped whenever the weights are mutated through this package (optimizer
    steps, copies) so that tapes from an older forward pass can be detected.
    """

    def __init__(self, layers: list[Layer]):
        for i in range(1, len(layers)):
            if layers[i].weight.shape[1] != layers[i - 1].weight.shape[0]:
                raise ShapeError(
                    f"layer {i} expects width {layers[i].weight.shape[1]}, "
                    f"previous layer emits {layers[i - 1].weight.shape[0]}"
                )
        self.layers = list(layers)
        self.version = 0

    @classmethod
    def init(
        cls,
        in_width: int,
        widths: Iterable[int],
        rng: np.random.Generator,
        hidden: str = "relu",
        head: str = "sigmoid",
        zero_head: bool = False,
    ) -> "MlpParams":
        """Glorot-uniform weights, zero biases. ``zero_head`` zeroes the last layer's weights."""
        widths = list(widths)
        layers = []
        fan_in = in_width
        for i, width in enumerate(widths):
            last = i == len(widths) - 1
            limit = np.sqrt(6.0 / (fan_in + width)) if fan_in + width > 0 else 0.0
            w = rng.uniform(-limit, limit, size=(width, fan_in))
            if last and zero_head:
                w[:] = 0.0
            layers.append(Layer(w, np.zeros(width), head if last else hidden))
            fan_in = width
        return cls(layers)

    @property
    def in_width(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_width(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def widths(self) -> list[int]:
        return [layer.weight.shape[0] for layer in self.layers]

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.weight"] = layer.weight
            out[f"{prefix}{i}.bias"] = layer.bias
        return out

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "MlpParams":
        return MlpParams([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def copy_from(self, other: "MlpParams") -> None:
        if [l.weight.shape for l in self.layers] != [l.weight.shape for l in other.layers]:
            raise ShapeError("cannot copy between MLPs of different shapes")
        for mine, theirs in zip(self.layers, other.layers):
            np.copyto(mine.weight, theirs.weight)
            np.copyto(mine.bias, theirs.bias)
        self.bump()

    def equal(self, other: "MlpParams") -> bool:
        return all(
            np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        ) and len(self.layers) == len(other.layers)


@dataclass
class MlpTape:
    inputs: np.ndarray
    pre: list
    post: list
    owner: int
    version: int
    squeeze: bool


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, MlpTape]:
    """Evaluate the MLP on a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != params.in_width:
        raise ShapeError(f"input width {h.shape[1]} != expected {params.in_width}")
    pre, post = [], []
    for layer in params.layers:
        z = h @ layer.weight.T + layer.bias
        h = _activate(layer.activation, z)
        pre.append(z)
        post.append(h)
    tape = MlpTape(x if not squeeze else x[None, :], pre, post, id(params), params.version, squeeze)
    return (h[0] if squeeze else h), tape


def mlp_backward(params: MlpParams, tape: MlpTape, output_grad) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backpropagate ``output_grad`` (gradient w.r.t. the MLP output) through a recorded tape.

    Returns parameter gradients keyed ``"{layer}.weight"``/``"{layer}.bias"`` and the gradient
    w.r.t. the input, shaped like the forward input.
    """
    if tape.owner != id(params) or tape.version != params.version:
        raise StaleTapeError("tape was recorded against a different parameter version")
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    grads: dict[str, np.ndarray] = {}
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        dz = _activation_grad(layer.activation, tape.pre[i], tape.post[i], g)
        below = tape.post[i - 1] if i > 0 else tape.inputs
        grads[f"{i}.weight"] = dz.T @ below
        grads[f"{i}.bias"] = dz.sum(axis=0)
        g = dz @ layer.weight
    return grads, (g[0] if tape.squeeze else g)


# --------------------------------------------------------------------------- loss


def bce(p, y, weight=1.0) -> np.ndarray:
    """Elementwise weighted cross-entropy with probabilities clamped to [eps, 1-eps]."""
    w = np.asarray(weight, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("sample weights must be nonnegative")
    pc = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    return w * -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))


def bce_loss(p: float, y: int, weight: float = 1.0) -> float:
    if weight < 0:
        raise ValueError(f"weight must be nonnegative, got {weight}")
    return float(bce(p, y, weight))


def bce_grad(p, y, weight=1.0) -> np.ndarray:
    """d bce / d p; zero where the clamp is active."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    safe = np.where(inside, p, 0.5)
    return np.where(inside, weight * (-y / safe + (1.0 - y) / (1.0 - safe)), 0.0)


# --------------------------------------------------------------------------- gradients


class GradientBundle:
    """Named dense gradients plus row-sparse gradients for embedding tables."""

    def __init__(self):
        self.dense: dict[str, np.ndarray] = {}
        self._chunks: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}

    def add(self, name: str, grad: np.ndarray) -> None:
        if name in self.dense:
            self.dense[name] = self.dense[name] + grad
        else:
            self.dense[name] = np.array(grad, dtype=np.float64)

    def add_all(self, grads: Mapping[str, np.ndarray], prefix: str = "") -> None:
        for name, g in grads.items():
            self.add(prefix + name, g)

    def add_rows(self, name: str, rows, values) -> None:
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        if len(rows):
            values = np.asarray(values, dtype=np.float64).reshape(len(rows), -1)
            self._chunks.setdefault(name, []).append((rows, values))

    @property
    def sparse_names(self) -> list[str]:
        return list(self._chunks)

    def rows(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Touched rows (sorted, unique) and their summed gradients."""
        chunks = self._chunks.get(name)
        if not chunks:
            return np.zeros(0, dtype=np.int64), np.zeros((0, 0))
        all_rows = np.concatenate([c[0] for c in chunks])
        all_vals = np.concatenate([c[1] for c in chunks])
        uniq, inverse = np.unique(all_rows, return_inverse=True)
        out = np.zeros((len(uniq), all_vals.shape[1]))
        np.add.at(out, inverse, all_vals)
        return uniq, out

    def names(self) -> list[str]:
        return list(self.dense) + self.sparse_names

    def is_finite(self) -> tuple[bool, list[str]]:
        bad = [n for n, g in self.dense.items() if not np.all(np.isfinite(g))]
        bad += [n for n, ch in self._chunks.items() if not all(np.all(np.isfinite(v)) for _, v in ch)]
        return not bad, bad

    def to_dense(self, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name, p in params.items():
            g = np.zeros_like(p)
            if name in self.dense:
                g += self.dense[name]
            if name in self._chunks:
                rows, vals = self.rows(name)
                g[rows] += vals
            out[name] = g
        return out


def _parameters_of(params) -> dict[str, np.ndarray]:
    return params.parameters() if hasattr(params, "parameters") else dict(params)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def _moments(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)
        m, v = self.m[name], self.v[name]
        if m.shape != like.shape:
            raise ShapeError(f"moment shape {m.shape} != parameter shape {like.shape} for {name}")
        return m, v

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})

    def reset(self) -> None:
        self.step = 0
        self.m.clear()
        self.v.clear()


def adam_step(state: AdamState, params, grads: GradientBundle) -> None:
    """One in-place Adam update with bias correction.

    ``params`` is a name->array mapping or an object with ``parameters()`` (and optionally
    ``bump()``). Parameters absent from ``grads`` are skipped; sparse entries update only
    the touched rows (lazy Adam).
    """
    ok, bad = grads.is_finite()
    if not ok:
        raise NonFiniteError(f"non-finite gradient in {', '.join(bad)}", component=bad[0])
    named = _parameters_of(params)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.dense.items():
        p = named[name]
        m, v = state._moments(name, p)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    for name in grads.sparse_names:
        p = named[name]
        rows, g = grads.rows(name)
        m, v = state._moments(name, p)
        mr = state.beta1 * m[rows] + (1.0 - state.beta1) * g
        vr = state.beta2 * v[rows] + (1.0 - state.beta2) * g * g
        m[rows] = mr
        v[rows] = vr
        p[rows] -= state.lr * (mr / c1) / (np.sqrt(vr / c2) + state.eps)
    if hasattr(params, "bump"):
        params.bump()


def grad_check(
    loss_fn: Callable[[], tuple[float, object]],
    params: Mapping[str, np.ndarray],
    step: float = 1e-3,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` returns ``(loss, grads)`` at the current parameter values, where grads is a
    name->array mapping or a GradientBundle. Arrays in ``params`` are perturbed in place and
    restored. Returns ``max |a - n| / max(1, |a|, |n|)`` over the checked entries; entries
    above ``tol`` are logged.
    """
    _, analytic = loss_fn()
    if isinstance(analytic, GradientBundle):
        analytic = analytic.to_dense(params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        a = np.asarray(analytic.get(name, np.zeros_like(p)))
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        for k in flat_idx:
            idx = np.unravel_index(k, p.shape)
            orig = p[idx]
            p[idx] = orig + step
            up = float(loss_fn()[0])
            p[idx] = orig - step
            down = float(loss_fn()[0])
            p[idx] = orig
            numeric = (up - down) / (2.0 * step)
            an = float(a[idx])
            err = abs(an - numeric) / max(1.0, abs(an), abs(numeric))
            if err > tol:
                log.debug("grad mismatch %s%s: analytic=%g numeric=%g", name, idx, an, numeric)
            worst = max(worst, err)
    return worst
