"""Momentum SGD shared by the SER model and the attack model."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError, ShapeError
from .mlp import MlpParams, ModelUpdate


def sgd_update(arrays, grads, lr: float, momentum: float = 0.0, velocity=None):
    """One step of ``v <- momentum * v + g; theta <- theta - lr * v``.

    Returns new ``(arrays, velocity)`` lists; inputs are not modified.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if len(arrays) != len(grads):
        raise ShapeError(f"{len(grads)} gradient arrays for {len(arrays)} parameters")
    if velocity is None:
        velocity = [None] * len(arrays)
    new_params, new_vel = [], []
    for p, g, v in zip(arrays, grads, velocity):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient entries")
        v = g if (v is None or momentum == 0.0) else momentum * v + g
        new_params.append(p - lr * v)
        new_vel.append(v)
    return new_params, new_vel


def sgd_step(params: MlpParams, grads: ModelUpdate, lr: float, momentum: float = 0.0, velocity=None):
    if not grads.matches(params):
        raise ShapeError("gradient shapes do not match the parameters")
    arrays, velocity = sgd_update(params.arrays(), grads.arrays(), lr, momentum, velocity)
    return MlpParams.from_arrays(arrays), velocity
