"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_grad(fn, inputs, h: float = 1e-5):
    """Central differences of scalar ``fn(*inputs)`` w.r.t. each input's data."""
    grads = []
    for x in inputs:
        g = np.zeros_like(x.data)
        flat, gflat = x.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(*inputs).data)
            flat[i] = orig - h
            down = float(fn(*inputs).data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn, inputs):
    for x in inputs:
        x.grad = None
    fn(*inputs).backward()
    return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn, inputs, h: float = 1e-5) -> float:
    """Largest relative error between reverse-mode and central differences."""
    inputs = [x if isinstance(x, Tensor) else Tensor(x, requires_grad=True) for x in inputs]
    ana = analytic_grad(fn, inputs)
    num = numeric_grad(fn, inputs, h)
    return max(relative_error(a, n) for a, n in zip(ana, num))
