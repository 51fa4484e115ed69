"""Minimal reverse-mode autodiff over numpy float64 arrays.

Every training objective in this package (trace/direct SFT, distillation,
preference ranking, clipped surrogate, value regression) is composed from
the primitives below, so one engine serves them all and a single
finite-difference harness can check any of them end-to-end.

Design notes:
  - float64 everywhere; forward values are checked for finiteness at node
    creation and the failing node is named in the error.
  - gradients accumulate into `.grad`; `zero_grad` resets parameters.
  - shapes stay small (desk scale), so clarity beats throughput.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError, NumericError


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (the reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph: value, gradient, and backward rule."""

    __slots__ = ("data", "grad", "name", "requires_grad", "_parents", "_backward")

    def __init__(self, data, name: str = "", requires_grad: bool = False,
                 parents: tuple = (), backward=None):
        self.data = _as_array(data)
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite value at node {name or '<unnamed>'}")
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = parents
        self._backward = backward

    # -- graph mechanics ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise InputError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not np.all(np.isfinite(node.grad)):
                    raise NumericError(
                        f"non-finite gradient at node {node.name or '<unnamed>'}")

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.data.shape})"


def constant(data, name: str = "const") -> Tensor:
    return Tensor(data, name=name)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, name=name, requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, name="const")


# -- primitive operations ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, name="add", parents=(a, b))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, name="mul", parents=(a, b))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * a.data, b.data.shape))

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data @ b.data, name="matmul", parents=(a, b))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ grad)

    out._backward = backward
    return out


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data ** exponent, name="power", parents=(a,))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * exponent * a.data ** (exponent - 1.0))

    out._backward = backward
    return out


def square(a) -> Tensor:
    return power(a, 2.0)


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    out = Tensor(y, name="tanh", parents=(a,))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * (1.0 - y * y))

    out._backward = backward
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    y = np.exp(a.data)
    out = Tensor(y, name="exp", parents=(a,))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * y)

    out._backward = backward
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.log(a.data), name="log", parents=(a,))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad / a.data)

    out._backward = backward
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # numerically stable two-branch form
    y = np.where(a.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = Tensor(y, name="sigmoid", parents=(a,))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * y * (1.0 - y))

    out._backward = backward
    return out


def abs_(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.abs(a.data), name="abs", parents=(a,))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * np.sign(a.data))

    out._backward = backward
    return out


def sum_(a, axis=None) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(axis=axis), name="sum", parents=(a,))

    def backward(grad):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(grad, a.data.shape).copy())
            else:
                a._accumulate(np.broadcast_to(
                    np.expand_dims(grad, axis), a.data.shape).copy())

    out._backward = backward
    return out


def mean(a, axis=None) -> Tensor:
    a = _wrap(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / count)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 name="concat", parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(grad):
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * grad.ndim
                index[axis] = slice(offset, offset + size)
                t._accumulate(grad[tuple(index)])
            offset += size

    out._backward = backward
    return out


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Select rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids], name="gather_rows", parents=(table,))

    def backward(grad):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids, grad)
            table._accumulate(acc)

    out._backward = backward
    return out


def take_per_row(a: Tensor, cols: np.ndarray) -> Tensor:
    """Pick one column per row of a 2-D tensor: out[t] = a[t, cols[t]]."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, cols], name="take_per_row", parents=(a,))

    def backward(grad):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[rows, cols] = grad
            a._accumulate(acc)

    out._backward = backward
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-wise log softmax, overflow-safe via the max-shift identity."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y, name="log_softmax", parents=(a,))

    def backward(grad):
        if a.requires_grad:
            softmax = np.exp(y)
            a._accumulate(grad - softmax * grad.sum(axis=axis, keepdims=True))

    out._backward = backward
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    a = _wrap(a)
    out = Tensor(np.clip(a.data, lo, hi), name="clip", parents=(a,))
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * inside)

    out._backward = backward
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient follows the smaller branch (ties go to `a`)."""
    a, b = _wrap(a), _wrap(b)
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data), name="minimum", parents=(a, b))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * take_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * ~take_a, b.data.shape))

    out._backward = backward
    return out


def flatten(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.ravel(), name="flatten", parents=(a,))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad.reshape(a.data.shape))

    out._backward = backward
    return out


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.T, name="transpose", parents=(a,))

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad.T)

    out._backward = backward
    return out


def causal_mean(a: Tensor) -> Tensor:
    """Row t of the output is the mean of rows 0..t of a 2-D input."""
    a = _wrap(a)
    t = a.data.shape[0]
    counts = np.arange(1, t + 1, dtype=np.float64)[:, None]
    out = Tensor(np.cumsum(a.data, axis=0) / counts, name="causal_mean",
                 parents=(a,))

    def backward(grad):
        if a.requires_grad:
            # d out[s] / d a[t] = 1/(s+1) for s >= t: reversed cumsum of grad/count
            weighted = grad / counts
            a._accumulate(np.cumsum(weighted[::-1], axis=0)[::-1])

    out._backward = backward
    return out


# -- parameter flattening ----------------------------------------------------


def flatten_params(params: list[Tensor]) -> np.ndarray:
    return np.concatenate([p.data.ravel() for p in params])


def unflatten_into(params: list[Tensor], flat: np.ndarray) -> None:
    offset = 0
    for p in params:
        size = p.data.size
        p.data = flat[offset:offset + size].reshape(p.data.shape).copy()
        offset += size
    if offset != flat.size:
        raise InputError(f"flat vector has {flat.size} values, model needs {offset}")


def flatten_grads(params: list[Tensor]) -> np.ndarray:
    parts = []
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        parts.append(grad.ravel())
    return np.concatenate(parts)


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_difference_gradient(loss_fn, params: list[Tensor],
                               step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss over flattened parameters.

    `loss_fn` must recompute the loss from the params' current `.data`;
    this is the independent oracle used by the gradient-check tests.
    """
    base = flatten_params(params)
    grad = np.zeros_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + step
        unflatten_into(params, bumped)
        hi = float(loss_fn())
        bumped[i] = base[i] - step
        unflatten_into(params, bumped)
        lo = float(loss_fn())
        grad[i] = (hi - lo) / (2.0 * step)
    unflatten_into(params, base)
    return grad
