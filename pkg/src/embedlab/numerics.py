"""Dense array arithmetic with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array and remembers the operation that
produced it.  Calling :func:`grad` on a scalar tensor walks the recorded
graph once in reverse topological order and returns gradients for the
requested leaves.  Tensors are never mutated; gradients are returned, not
stored.

:func:`finite_diff` is an independent central-difference oracle used to
check every analytic gradient in the test-suite.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NonFiniteError

__all__ = [
    "Tensor",
    "as_tensor",
    "grad",
    "finite_diff",
    "cosine",
    "softmax_row",
    "l2_normalize",
    "cosine_matrix",
    "rowwise_cosine",
    "softmax",
    "logsumexp",
    "matmul",
    "concat",
    "rms_norm",
    "gelu",
    "relative_error",
]

_NORM_FLOOR = 1e-30


class Tensor:
    """Node of a differentiable computation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

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

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.kind in "iub":
        arr = arr.astype(np.float64)
    return Tensor(arr)


def _const(x, like: Tensor):
    """Wrap a python/numpy constant with the dtype of ``like``."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _needs(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _node(data, parents, backward, op) -> Tensor:
    rg = _needs(*parents)
    if not rg:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        return a, _const(b, a)
    b = as_tensor(b)
    return _const(a, b), b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward, "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _node(out, (a,), backward, "gelu")


# ---------------------------------------------------------------- reductions / shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _node(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a) -> Tensor:
    """Swap the two trailing axes."""
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def take(a, index) -> Tensor:
    """Basic or fancy indexing; fancy-index gradients are scatter-added."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (a,), backward, "take")


def concat(items: Sequence, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in items]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, tuple(ts), backward, "concat")


def matmul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul operands must be at least 2-D")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------- fused numerics


def l2_normalize(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= _NORM_FLOOR):
        raise DomainError("cannot normalize a zero-norm vector")
    out = a.data / norm

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / norm,)

    return _node(out, (a,), backward, "normalize")


def rms_norm(a, weight, eps=1e-6) -> Tensor:
    a = as_tensor(a)
    weight = _const(weight, a)
    x = a.data
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    xhat = x * inv
    out = xhat * weight.data
    d = x.shape[-1]

    def backward(g):
        gw = _unbroadcast(g * xhat, weight.shape)
        gx_hat = g * weight.data
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gw

    return _node(out, (a, weight), backward, "rmsnorm")


def softmax(a, axis=-1, mask=None) -> Tensor:
    """Max-subtracted softmax; ``mask`` (bool, broadcastable) excludes entries."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), backward, "softmax")


def logsumexp(a, axis=-1, mask=None, keepdims=False) -> Tensor:
    """Stable log-sum-exp; masked-out entries contribute nothing."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DomainError("logsumexp over an empty set")
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    w = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return _node(out, (a,), backward, "logsumexp")


def cosine_matrix(x, y) -> Tensor:
    """Pairwise cosine similarity of the rows of ``x`` and ``y``."""
    return matmul(l2_normalize(x), swap_last(l2_normalize(y)))


def rowwise_cosine(x, y) -> Tensor:
    """Cosine similarity of matching rows."""
    return tsum(l2_normalize(x) * l2_normalize(y), axis=-1)


# ---------------------------------------------------------------- public scalar API


def cosine(x, y) -> float:
    """Cosine similarity of two vectors; zero-norm input is a domain error."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ContractError(f"cosine of vectors with shapes {x.shape} and {y.shape}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise DomainError("cosine undefined for a zero-norm vector")
    return float(np.clip(np.dot(x / nx, y / ny), -1.0, 1.0))


def softmax_row(m, tau: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``m / tau``."""
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    arr = np.atleast_2d(np.asarray(m, dtype=np.float64)) / tau
    return softmax(arr, axis=-1).data


# ---------------------------------------------------------------- differentiation


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each of ``params``.

    Leaves that do not influence the loss receive zero arrays.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("grad requires a scalar loss tensor")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape))
    return out


def finite_diff(
    f: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` at ``params``.

    ``f`` receives a list of arrays (copies with one coordinate perturbed)
    and must return a finite scalar.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    base = [np.array(p, dtype=np.float64, copy=True) for p in params]
    grads = []
    for k, p in enumerate(base):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(base))
            flat[i] = orig - eps
            fm = float(f(base))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite objective probing param {k} coordinate {i}", index=(k, i))
            g.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: Iterable[np.ndarray], numeric: Iterable[np.ndarray], atol: float = 1e-10) -> float:
    """Largest coordinate error relative to the overall gradient scale.

    The scale is the largest magnitude over every array of both
    gradients (floored at ``atol``), so parameters whose gradient is pure
    round-off next to the others do not dominate the comparison.
    """
    pairs = [(np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64))
             for a, n in zip(analytic, numeric)]
    scale = max([atol] + [max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs])
    return float(max((np.abs(a - n).max(initial=0.0) for a, n in pairs), default=0.0) / scale)
