"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a float64 numpy array. Operations on tensors that
require gradients record their parents and a closure computing the local
vector-Jacobian product; :meth:`Tensor.backward` replays those closures in
reverse topological order, summing contributions from shared subexpressions.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError
from . import kernels

DTYPE = np.float64


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable[[np.ndarray], None] | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph ---------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Non-leaf gradients are released after use so repeated calls on
        fresh graphs never see stale intermediates.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
                (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _make(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def backward(g):
        return ((a, g * exponent * a.data ** (exponent - 1)),)

    return _make(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: ((a, g * out),))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _make(out, (a,), lambda g: ((a, g / a.data),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: ((a, g * 0.5 / out),))


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    return _make(out, (a,), lambda g: ((a, 2.0 * g * a.data),))


# -- activations -----------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = _wrap(x)
    scale = np.where(x.data >= 0, 1.0, slope)
    out = x.data * scale
    return _make(out, (x,), lambda g: ((x, g * scale),))


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    scale = (x.data > 0).astype(DTYPE)
    out = x.data * scale
    return _make(out, (x,), lambda g: ((x, g * scale),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((x, out * (g - (g * out).sum(axis=axis, keepdims=True))),)

    return _make(out, (x,), backward)


# -- reductions and shape --------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape)),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: ((a, g.reshape(a.shape)),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: ((a, np.transpose(g, inverse)),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            # basic indexing never repeats an element
            full[index] = g
        else:
            np.add.at(full, index, g)
        return ((a, full),)

    return _make(out, (a,), backward)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows ``table[idx]``; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.intp)
    out = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return ((table, full),)

    return _make(out, (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(zip(tensors, np.split(g, bounds, axis=axis)))

    return _make(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple((t, np.take(g, i, axis=axis)) for i, t in enumerate(tensors))

    return _make(out, tensors, backward)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return ((a, g @ b.data.T if a.requires_grad else None),
                (b, a.data.T @ g if b.requires_grad else None))

    return _make(out, (a, b), backward)


def bmm(a, b) -> Tensor:
    """Batched matrix product over matching leading axes (``... x n x k`` @ ``... x k x p``)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    # strided views make matmul fall off the BLAS path
    ad, bd = np.ascontiguousarray(a.data), np.ascontiguousarray(b.data)
    out = np.matmul(ad, bd)

    def backward(g):
        return ((a, np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None),
                (b, np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None))

    return _make(out, (a, b), backward)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum; every index of an operand must occur in the output
    or in the other operand."""
    a, b = _wrap(a), _wrap(b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        stray = set(own) - set(other) - set(out_idx)
        if stray:
            raise DimensionError(f"einsum index {sorted(stray)} summed within one operand")
    try:
        out = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise DimensionError(f"einsum '{spec}' on shapes {a.shape}, {b.shape}: {exc}") from exc

    def backward(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, a.data, optimize=True) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _make(out, (a, b), backward)


def pairwise_js(p: Tensor) -> Tensor:
    """Jensen-Shannon divergence between every pair of rows of ``p``.

    Rows must already be strictly positive probability vectors. The gradient
    treats rows as free coordinates: dJS(p, q)/dp_k = 0.5 * log(2 p_k / (p_k + q_k)).
    """
    p = _wrap(p)
    out = kernels.pairwise_js(p.data)

    def backward(g):
        return ((p, kernels.pairwise_js_grad(p.data, g)),)

    return _make(out, (p,), backward)


def parameters_l2(params: Iterable[Tensor]) -> Tensor:
    total = None
    for w in params:
        term = tsum(square(w))
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)
