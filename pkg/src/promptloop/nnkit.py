"""Minimal trainable substrate: dense networks with exact reverse-mode grads.

Everything is plain numpy float64. Networks are stacks of dense layers with
identity or rectifier activations; `forward` caches activations for a single
subsequent `backward`. Losses return (value, d value / d prediction) pairs so
callers can chain them through `backward` by hand. The optimizer is Adam with
a cosine-annealed learning rate.

Checkpoints are versioned JSON. Python's json module serializes floats via
repr (shortest round-trip form), so a save/load cycle reproduces every
parameter bit-exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

_ACTIVATIONS = ("identity", "relu")

_CLAMP_LO = 1e-7
_CLAMP_HI = 1.0 - 1e-7

SCHEMA_VERSION = 1


class NonFiniteGradientError(ValueError):
    """Raised by optimizer_step when a gradient block contains NaN/Inf."""


@dataclass
class Layer:
    """Dense layer y = act(W x + b); weights shaped (out, in)."""

    weights: np.ndarray
    biases: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.biases = np.asarray(self.biases, dtype=float)
        if self.weights.ndim != 2:
            raise ValueError("weights must be 2-D (out, in)")
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError("biases must be (out,) matching weights")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class Network:
    """A stack of dense layers with a single-slot activation cache.

    `forward` accepts a vector (in,) or a batch (n, in) and stores the
    intermediates needed by exactly one `backward` call; calling forward
    again overwrites the cache.
    """

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if b.weights.shape[1] != a.weights.shape[0]:
                raise ValueError("layer dimension mismatch")
        self.layers = layers
        self._cache: list[tuple[np.ndarray, np.ndarray]] | None = None

    @property
    def in_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ValueError(
                f"input shape {x.shape} incompatible with in_dim {self.in_dim}"
            )
        cache = []
        for layer in self.layers:
            z = h @ layer.weights.T + layer.biases
            cache.append((h, z))
            h = z if layer.activation == "identity" else np.maximum(z, 0.0)
        self._cache = cache
        return h[0] if squeeze else h

    def backward(self, upstream: np.ndarray) -> "GradientTape":
        """Exact gradients of sum(output * upstream) w.r.t. params and input."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        up = np.asarray(upstream, dtype=float)
        squeeze = up.ndim == 1
        g = up[None, :] if squeeze else up
        if g.shape != (self._cache[-1][1].shape[0], self.out_dim):
            raise ValueError("upstream shape does not match last forward output")
        wgrads: list[np.ndarray] = [None] * len(self.layers)  # type: ignore
        bgrads: list[np.ndarray] = [None] * len(self.layers)  # type: ignore
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            x_in, z = self._cache[i]
            dz = g if layer.activation == "identity" else g * (z > 0.0)
            wgrads[i] = dz.T @ x_in
            bgrads[i] = dz.sum(axis=0)
            g = dz @ layer.weights
        return GradientTape(
            weights=wgrads,
            biases=bgrads,
            input=g[0] if squeeze else g,
        )

    def copy(self) -> "Network":
        return Network(
            [
                Layer(l.weights.copy(), l.biases.copy(), l.activation)
                for l in self.layers
            ]
        )

    def param_blocks(self):
        """Yields (name, array) for every parameter block, in a fixed order."""
        for i, layer in enumerate(self.layers):
            yield f"layer{i}.weights", layer.weights
            yield f"layer{i}.biases", layer.biases


@dataclass
class GradientTape:
    """Per-block gradients aligned with a Network's layers, plus input grad."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray | None = None

    def add_(self, other: "GradientTape", scale: float = 1.0) -> "GradientTape":
        for i in range(len(self.weights)):
            self.weights[i] += scale * other.weights[i]
            self.biases[i] += scale * other.biases[i]
        return self

    def scale_(self, s: float) -> "GradientTape":
        for i in range(len(self.weights)):
            self.weights[i] *= s
            self.biases[i] *= s
        return self

    def blocks(self):
        for i in range(len(self.weights)):
            yield f"layer{i}.weights", self.weights[i]
            yield f"layer{i}.biases", self.biases[i]


def zero_tape(net: Network) -> GradientTape:
    return GradientTape(
        weights=[np.zeros_like(l.weights) for l in net.layers],
        biases=[np.zeros_like(l.biases) for l in net.layers],
    )


def dense_network(sizes: list[int], rng: np.random.Generator,
                  hidden_activation: str = "relu",
                  out_activation: str = "identity") -> Network:
    """He/Xavier-initialized dense stack: sizes = [in, hidden..., out]."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        act = out_activation if i == len(sizes) - 2 else hidden_activation
        std = math.sqrt(2.0 / fan_in) if act == "relu" else math.sqrt(1.0 / fan_in)
        layers.append(
            Layer(rng.normal(0.0, std, size=(fan_out, fan_in)), np.zeros(fan_out), act)
        )
    return Network(layers)


# ------------------------------------------------------------------- losses


def _clamped(pred: np.ndarray):
    p = np.clip(pred, _CLAMP_LO, _CLAMP_HI)
    live = (pred > _CLAMP_LO) & (pred < _CLAMP_HI)  # grad is zero where clamped
    return p, live


def focal_loss(pred: np.ndarray, labels: np.ndarray,
               gamma: float = 2.0, alpha: float = 0.25):
    """Mean focal loss on probabilities in (0,1) with binary labels.

    Returns (loss, grad) where grad is d loss / d pred, elementwise, and is
    exactly zero wherever the internal [1e-7, 1-1e-7] clamp is active.
    gamma=0, alpha=0.5 reduces to half the mean binary cross-entropy.
    """
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(labels, dtype=float)
    if pred.shape != y.shape:
        raise ValueError("pred and labels must share a shape")
    p, live = _clamped(pred)
    pos = y == 1.0
    lp, l1p = np.log(p), np.log1p(-p)
    loss_el = np.where(
        pos,
        -alpha * (1.0 - p) ** gamma * lp,
        -(1.0 - alpha) * p ** gamma * l1p,
    )
    if gamma == 0.0:
        dpos = -alpha / p
        dneg = (1.0 - alpha) / (1.0 - p)
    else:
        dpos = alpha * (gamma * (1.0 - p) ** (gamma - 1.0) * lp - (1.0 - p) ** gamma / p)
        dneg = -(1.0 - alpha) * (gamma * p ** (gamma - 1.0) * l1p - p ** gamma / (1.0 - p))
    grad_el = np.where(pos, dpos, dneg) * live
    n = pred.size
    return float(loss_el.sum() / n), grad_el / n


def dice_loss(pred: np.ndarray, labels: np.ndarray, eps: float = 1e-6):
    """Soft Dice loss 1 - 2*sum(p*y) / (sum(p) + sum(y) + eps), global reduction."""
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(labels, dtype=float)
    if pred.shape != y.shape:
        raise ValueError("pred and labels must share a shape")
    p, live = _clamped(pred)
    num = 2.0 * float((p * y).sum())
    den = float(p.sum() + y.sum()) + eps
    loss = 1.0 - num / den
    grad = (num - 2.0 * y * den) / (den * den) * live
    return float(loss), grad


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0,
              reduction: str = "mean"):
    """Huber-style smooth L1; per-element loss is beta/2 at |d| = beta with
    unit gradient magnitude there (before reduction)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    pred = np.asarray(pred, dtype=float)
    t = np.asarray(target, dtype=float)
    if pred.shape != t.shape:
        raise ValueError("pred and target must share a shape")
    d = pred - t
    ad = np.abs(d)
    loss_el = np.where(ad <= beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad_el = np.clip(d / beta, -1.0, 1.0)
    if reduction == "mean":
        n = pred.size
        return float(loss_el.sum() / n), grad_el / n
    if reduction == "sum":
        return float(loss_el.sum()), grad_el
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    """Adam moments for one Network, plus the shared step counter."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_optimizer(net: Network, lr: float = 2e-4) -> OptimizerState:
    blocks = [np.zeros_like(arr) for _, arr in net.param_blocks()]
    return OptimizerState(lr=lr, m=blocks, v=[b.copy() for b in blocks])


def cosine_lr(base_lr: float, schedule_position: float) -> float:
    """Cosine annealing from base_lr (position 0) to 0 (position 1)."""
    s = min(max(schedule_position, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * s))


def optimizer_step(net: Network, tape: GradientTape, state: OptimizerState,
                   schedule_position: float) -> None:
    """One in-place Adam update with bias correction and cosine-annealed lr.

    Raises NonFiniteGradientError naming the offending block if any gradient
    entry is NaN or infinite.
    """
    grads = list(tape.blocks())
    params = list(net.param_blocks())
    if len(grads) != len(params):
        raise ValueError("tape does not match network")
    for (name, g), (_, p) in zip(grads, params):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    lr_t = cosine_lr(state.lr, schedule_position)
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, ((_, g), (_, p)) in enumerate(zip(grads, params)):
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        p -= lr_t * mhat / (np.sqrt(vhat) + state.eps)


# --------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    per_block: dict[str, float]
    max_rel_err: float
    failures: list[str]
    tolerance: float

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(net: Network, loss_fn, x: np.ndarray,
               tolerance: float = 1e-4, step: float = 1e-5,
               floor: float = 1e-8) -> GradCheckReport:
    """Central-difference check of loss_fn's analytic parameter gradients.

    loss_fn(net, x) must return (scalar loss, GradientTape). Every parameter
    entry is perturbed by ±step; relative error uses
    |fd - analytic| / max(|fd|, |analytic|, floor). Raise `floor` for losses
    built from long op chains, where central-difference roundoff (~1e-10 on
    unit-scale losses) would dominate entries whose true gradient is tiny.
    """
    _, tape = loss_fn(net, x)
    analytic = {name: g.copy() for name, g in tape.blocks()}
    per_block: dict[str, float] = {}
    for name, arr in net.param_blocks():
        worst = 0.0
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            f_plus = loss_fn(net, x)[0]
            arr[idx] = orig - step
            f_minus = loss_fn(net, x)[0]
            arr[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            a = analytic[name][idx]
            rel = abs(fd - a) / max(abs(fd), abs(a), floor)
            worst = max(worst, rel)
        per_block[name] = worst
    max_err = max(per_block.values())
    failures = [n for n, e in per_block.items() if e > tolerance]
    return GradCheckReport(per_block, max_err, failures, tolerance)


# --------------------------------------------------------------- checkpoint


def _net_to_obj(net: Network):
    return [
        {
            "weights": l.weights.tolist(),
            "biases": l.biases.tolist(),
            "activation": l.activation,
        }
        for l in net.layers
    ]


def _net_from_obj(obj) -> Network:
    return Network(
        [
            Layer(np.array(l["weights"], dtype=float),
                  np.array(l["biases"], dtype=float),
                  l["activation"])
            for l in obj
        ]
    )


def save_params(path: str, networks: dict[str, Network],
                arrays: dict[str, np.ndarray] | None = None,
                meta: dict | None = None) -> None:
    """Write a versioned JSON checkpoint; floats round-trip bit-exactly."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "meta": meta or {},
        "networks": {name: _net_to_obj(net) for name, net in networks.items()},
        "arrays": {
            name: {"shape": list(a.shape), "data": np.asarray(a, dtype=float).ravel().tolist()}
            for name, a in (arrays or {}).items()
        },
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f)


def load_params(path: str):
    """Returns (networks, arrays, meta); rejects unknown schema versions."""
    with open(path) as f:
        doc = json.load(f)
    ver = doc.get("schema_version")
    if ver != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema_version {ver!r}")
    networks = {name: _net_from_obj(obj) for name, obj in doc["networks"].items()}
    arrays = {
        name: np.array(a["data"], dtype=float).reshape(a["shape"])
        for name, a in doc.get("arrays", {}).items()
    }
    return networks, arrays, doc.get("meta", {})
