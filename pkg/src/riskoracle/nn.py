"""Parameter initialisation and small reusable layers."""

from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateBatchError, DimensionError
from .tensor import Tensor, mul, add, sqrt, mean, square


def init_param(shape, seed) -> Tensor:
    """Uniform fan-based initialisation in +-sqrt(6 / (fan_in + fan_out)).

    ``seed`` is an int or a ``numpy.random.Generator``. For tensors of rank
    two or more the last axis is the fan-out and the product of the rest the
    fan-in; vectors use their length for both.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise DimensionError(f"init_param needs positive extents, got {shape}")
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_in, fan_out = int(np.prod(shape[:-1])), shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class BatchNorm:
    """Per-column standardisation with learned scale and shift.

    In training mode the batch statistics are used and the running estimates
    are updated with ``momentum``; in eval mode the running estimates are used.
    """

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self, training)


def batch_norm(x: Tensor, state: BatchNorm, training: bool, batch_stats: bool | None = None) -> Tensor:
    """Normalise over the row axis of ``n x d`` input.

    Stacked ``b x n x d`` input normalises each of the ``b`` slices with its
    own statistics; running estimates take the mean over slices. Running
    estimates change only when ``training``. ``batch_stats`` (default: same as
    ``training``) chooses the statistics used to normalise.
    """
    if x.ndim not in (2, 3):
        raise DimensionError(f"batch_norm expects n x d or b x n x d input, got {x.shape}")
    batch_stats = training if batch_stats is None else batch_stats
    if training and not batch_stats:
        raise ValueError("training mode always normalises with batch statistics")
    if batch_stats:
        n = x.shape[-2]
        if n < 2:
            raise DegenerateBatchError(f"batch_norm needs at least 2 rows for batch statistics, got {n}")
        mu = mean(x, axis=-2, keepdims=True)
        centered = x - mu
        var = mean(square(centered), axis=-2, keepdims=True)
        xhat = centered / sqrt(var + state.eps)
    else:
        xhat = (x - state.running_mean) / np.sqrt(state.running_var + state.eps)
    if training:
        m = state.momentum
        batch_mu = mu.data.reshape(-1, x.shape[-1]).mean(axis=0)
        unbiased = var.data.reshape(-1, x.shape[-1]).mean(axis=0) * n / (n - 1)
        state.running_mean = (1 - m) * state.running_mean + m * batch_mu
        state.running_var = (1 - m) * state.running_var + m * unbiased
    return add(mul(xhat, state.gamma), state.beta)
