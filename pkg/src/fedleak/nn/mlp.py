"""Dense ReLU network with exact gradients, plus the shared loss helpers.

The SER model is ``input -> 256 -> 128 -> classes`` with ReLU and inverted
dropout after each hidden layer. Everything is float64 numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ..errors import ShapeError

SER_HIDDEN = (256, 128)


class UpdateKind(str, Enum):
    RAW_GRADIENT = "raw"
    PSEUDO_GRADIENT = "pseudo"
    PARAM_DELTA = "delta"

    @property
    def code(self) -> int:
        return _KIND_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "UpdateKind":
        for kind, c in _KIND_CODES.items():
            if c == code:
                return kind
        raise ValueError(f"unknown update kind code {code}")


_KIND_CODES = {UpdateKind.RAW_GRADIENT: 0, UpdateKind.PSEUDO_GRADIENT: 1, UpdateKind.PARAM_DELTA: 2}


@dataclass
class MlpParams:
    """Ordered ``(W, b)`` pairs; ``W`` is ``(fan_in, fan_out)``."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        for i, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.ndim != 1 or W.shape[1] != b.shape[0]:
                raise ShapeError(f"layer {i}: W {W.shape} and b {b.shape} do not agree")
            if i and W.shape[0] != self.layers[i - 1][0].shape[1]:
                raise ShapeError(f"layer {i}: fan-in {W.shape[0]} != previous fan-out")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[0],) + tuple(W.shape[1] for W, _ in self.layers)

    @property
    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [(W.shape, b.shape) for W, b in self.layers]

    def copy(self) -> "MlpParams":
        return MlpParams([(W.copy(), b.copy()) for W, b in self.layers])

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in self.layers for a in pair]

    @classmethod
    def from_arrays(cls, arrays) -> "MlpParams":
        arrays = list(arrays)
        return cls([(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)])


@dataclass
class ModelUpdate:
    """Per-layer ``(dW, db)`` shared by one client in one round."""

    per_layer: list[tuple[np.ndarray, np.ndarray]]
    round: int = 0
    client_id: str = ""
    kind: UpdateKind = UpdateKind.RAW_GRADIENT

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in self.per_layer for a in pair]

    @property
    def shapes(self):
        return [(dW.shape, db.shape) for dW, db in self.per_layer]

    def matches(self, params: MlpParams) -> bool:
        return self.shapes == params.shapes


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(dims, rng: np.random.Generator) -> MlpParams:
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("need at least input and output widths")
    if any(d <= 0 for d in dims):
        raise ValueError(f"layer widths must be positive, got {dims}")
    return MlpParams([(glorot_uniform(rng, a, b), np.zeros(b)) for a, b in zip(dims[:-1], dims[1:])])


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate).

    Uniforms are drawn in float32; the mask itself is float64.
    """
    keep = rng.random(shape, dtype=np.float32) >= np.float32(rate)
    return keep * (1.0 / (1.0 - rate))


@dataclass
class MlpCache:
    params: MlpParams
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each dense layer
    active: list[np.ndarray] = field(default_factory=list)  # ReLU gates of hidden layers
    masks: list[np.ndarray | None] = field(default_factory=list)
    logits: np.ndarray | None = None


def mlp_forward(params: MlpParams, batch, dropout_rates=(), mode="eval", rng=None):
    """Forward a ``(rows, input_dim)`` batch; returns ``(logits, cache)``.

    ``dropout_rates`` gives one rate per hidden layer (missing entries mean 0).
    In eval mode dropout is the identity and the rng is never touched.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dims[0]:
        raise ShapeError(f"batch shape {x.shape} does not fit input dim {params.dims[0]}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n_hidden = len(params.layers) - 1
    rates = list(dropout_rates) + [0.0] * (n_hidden - len(dropout_rates))
    for p in rates:
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    cache = MlpCache(params)
    for i, (W, b) in enumerate(params.layers):
        cache.inputs.append(x)
        z = x @ W + b
        if i == n_hidden:
            cache.logits = z
            return z, cache
        active = z > 0
        x = np.where(active, z, 0.0)
        mask = None
        if mode == "train" and rates[i] > 0:
            mask = dropout_mask(rng, x.shape, rates[i])
            x = x * mask
        cache.active.append(active)
        cache.masks.append(mask)
    raise AssertionError("unreachable")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ValueError("label out of range")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def mlp_backward_from_logits(cache: MlpCache, dlogits, input_grad=False):
    """Backpropagate an arbitrary ``dL/dlogits``; returns per-layer grads (and dL/dx)."""
    params = cache.params
    if cache.logits is None or len(cache.inputs) != len(params.layers):
        raise ShapeError("cache does not come from a completed forward pass")
    grads = [None] * len(params.layers)
    delta = dlogits
    for i in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[i]
        x = cache.inputs[i]
        grads[i] = (x.T @ delta, delta.sum(axis=0))
        if i == 0 and not input_grad:
            return grads, None
        delta = delta @ W.T
        if i > 0:
            if cache.masks[i - 1] is not None:
                delta = delta * cache.masks[i - 1]
            delta = np.where(cache.active[i - 1], delta, 0.0)
    return grads, delta


def mlp_backward(params: MlpParams, cache: MlpCache, labels):
    """Mean softmax cross-entropy and its raw gradient as a :class:`ModelUpdate`."""
    if cache.params is not params:
        if cache.params.shapes != params.shapes:
            raise ShapeError("cache was produced by a model of different shape")
        raise ShapeError("stale cache: produced by a different parameter object")
    loss, dlogits = softmax_cross_entropy(cache.logits, labels)
    grads, _ = mlp_backward_from_logits(cache, dlogits)
    return float(loss), ModelUpdate(grads, kind=UpdateKind.RAW_GRADIENT)
