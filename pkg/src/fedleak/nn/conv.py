"""Three-stage convolutional feature extractor used by the attack branches.

Each stage is ``same``-padded 5x5 convolution (stride 1), ReLU, inverted
dropout (train mode only) and 2x2/stride-2 max pooling. Pooling is applied
per spatial axis only when that axis has extent >= 2, so skinny inputs such
as a 128x4 weight update still pass through all three stages. Odd extents
are floored (the last row/column is dropped).

Arrays are channels-last, ``(batch, height, width, channels)``; filters are
``(k, k, in_channels, out_channels)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from . import kernels
from .mlp import dropout_mask

KERNEL_SIZE = 5
CHANNELS = (1, 16, 32, 64)


@dataclass
class ConvLayer:
    W: np.ndarray  # (k, k, c_in, c_out)
    b: np.ndarray  # (c_out,)

    @property
    def c_in(self) -> int:
        return self.W.shape[2]

    @property
    def c_out(self) -> int:
        return self.W.shape[3]

    def copy(self) -> "ConvLayer":
        return ConvLayer(self.W.copy(), self.b.copy())


def init_conv_stack(rng: np.random.Generator, channels=CHANNELS, k: int = KERNEL_SIZE) -> list[ConvLayer]:
    """Glorot-uniform filters, zero biases."""
    layers = []
    for c_in, c_out in zip(channels[:-1], channels[1:]):
        fan_in, fan_out = c_in * k * k, c_out * k * k
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(k, k, c_in, c_out))
        layers.append(ConvLayer(W, np.zeros(c_out)))
    return layers


def pool_factors(h: int, w: int) -> tuple[int, int]:
    return (2 if h >= 2 else 1), (2 if w >= 2 else 1)


def output_hw(h: int, w: int, stages: int = 3) -> tuple[int, int]:
    for _ in range(stages):
        ph, pw = pool_factors(h, w)
        h, w = h // ph, w // pw
    return h, w


def feature_length(h: int, w: int, channels=CHANNELS) -> int:
    ho, wo = output_hw(h, w, len(channels) - 1)
    return ho * wo * channels[-1]


@dataclass
class _StageCache:
    in_shape: tuple
    cols: np.ndarray
    z: np.ndarray  # pre-activation, (B, H, W, c_out)
    drop: np.ndarray | None
    pool: tuple[int, int]
    argmax: np.ndarray


@dataclass
class ConvCache:
    layers: list[ConvLayer]
    stages: list[_StageCache] = field(default_factory=list)
    out_shape: tuple = ()


def conv_stack_forward_batch(x, layers, dropout=0.2, mode="eval", rng=None):
    """Forward a channels-last batch ``(B, H, W, C)``; returns ``(B, L)`` features."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected (batch, H, W, C) input, got shape {x.shape}")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"non-positive spatial extent {x.shape[1:3]}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cache = ConvCache(layers)
    for layer in layers:
        if x.shape[3] != layer.c_in:
            raise ShapeError(f"stage expects {layer.c_in} channels, input has {x.shape[3]}")
        bsz, h, w, _ = x.shape
        k = layer.W.shape[0]
        cols = kernels.im2col(x, k)
        z = (cols @ layer.W.reshape(-1, layer.c_out) + layer.b).reshape(bsz, h, w, layer.c_out)
        drop = None
        if mode == "train" and dropout > 0:
            drop = dropout_mask(rng, z.shape, dropout)
        ph, pw = pool_factors(h, w)
        pooled, argmax = kernels.relu_drop_pool_forward(z, drop, ph, pw)
        cache.stages.append(_StageCache(x.shape, cols, z, drop, (ph, pw), argmax))
        x = pooled
    cache.out_shape = x.shape
    return x.reshape(x.shape[0], -1), cache


def conv_stack_backward_batch(cache: ConvCache, dfeatures, input_grad=False):
    """Backpropagate ``dL/dfeatures``; returns ``(layer grads, dL/dinput or None)``."""
    dx = np.asarray(dfeatures, dtype=np.float64).reshape(cache.out_shape)
    grads: list[ConvLayer] = [None] * len(cache.layers)  # type: ignore[list-item]
    for s in range(len(cache.layers) - 1, -1, -1):
        st, layer = cache.stages[s], cache.layers[s]
        ph, pw = st.pool
        dz = kernels.relu_drop_pool_backward(np.ascontiguousarray(dx), st.argmax, st.z, st.drop, ph, pw)
        dz = dz.reshape(-1, layer.c_out)
        dW = (st.cols.T @ dz).reshape(layer.W.shape)
        grads[s] = ConvLayer(dW, dz.sum(axis=0))
        if s > 0 or input_grad:
            dcols = dz @ layer.W.reshape(-1, layer.c_out).T
            dx = kernels.col2im(dcols, st.in_shape, layer.W.shape[0])
        else:
            dx = None
    return grads, dx


def conv_stack_forward(image, layers, mode="eval", rng=None, dropout=0.2):
    """Forward a single ``(channels, H, W)`` image; returns flat features and cache."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected (channels, H, W) input, got shape {image.shape}")
    feats, cache = conv_stack_forward_batch(image.transpose(1, 2, 0)[None], layers, dropout, mode, rng)
    return feats[0], cache


def conv_stack_backward(cache: ConvCache, dfeatures, input_grad=False):
    """Single-image counterpart of :func:`conv_stack_backward_batch`.

    The input gradient, when requested, is returned as ``(channels, H, W)``.
    """
    grads, dx = conv_stack_backward_batch(cache, np.asarray(dfeatures)[None], input_grad)
    if dx is not None:
        dx = dx[0].transpose(2, 0, 1)
    return grads, dx
